//! Contrastive objectives over cosine similarities.
//!
//! Every loss has two forms: a tape form used for training (`*_var`) and an
//! eager form over plain tensors. Both reduce by the mean over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default temperature.
pub const TEMPERATURE: f64 = 0.07;

/// Rows shorter than this are rejected as degenerate, and the same value
/// clamps the norm during normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub inter: f64,
    pub intra_a: f64,
    pub intra_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            inter: 1.0,
            intra_a: 1.0,
            intra_v: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(inter: f64, intra_a: f64, intra_v: f64) -> Result<Self> {
        let w = LossWeights {
            inter,
            intra_a,
            intra_v,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.inter, self.intra_a, self.intra_v];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("loss weights must be non-negative, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub inter: f64,
    pub intra_a: f64,
    pub intra_v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub total: f64,
    pub components: LossComponents,
}

/// Which pair of views the intra-modal loss contrasts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntraMode {
    /// Predicted embedding of the original vs. embedding of the augmented input.
    #[default]
    Equivariant,
    /// Embeddings of two independently augmented views.
    Invariant,
}

/// Which representation of each item anchors the inter-modal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterAnchor {
    /// Pooled representation of the un-augmented input.
    Original,
    /// Pooled representation of the augmented input.
    Augmented,
    /// Single prediction from the intra-modal augmentation vector.
    Equivariant,
    /// Mean of `S` predictions from freshly sampled vectors.
    #[default]
    Centroid,
}

/// `s[i][j] = exp(cos(a_i, b_j) / τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub tau: f64,
    pub entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }
}

fn check_rows(t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::contract(format!("embeddings must be N×p, got {:?}", t.shape())));
    }
    let cols = t.shape()[1];
    for (i, row) in t.values().chunks(cols).enumerate() {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_EPS {
            return Err(Error::DegenerateEmbedding(i));
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

pub fn similarity_matrix(a: &Tensor, b: &Tensor, tau: f64) -> Result<SimilarityMatrix> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let (av, bv) = (tape.input(a.clone()), tape.input(b.clone()));
    let logits = cosine_logits(&mut tape, av, bv, tau)?;
    let l = tape.value(logits);
    Ok(SimilarityMatrix {
        rows: l.shape()[0],
        cols: l.shape()[1],
        tau,
        entries: l.values().iter().map(|v| v.exp()).collect(),
    })
}

/// `cos(a_i, b_j) / τ` as an `N×M` node.
pub fn cosine_logits(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_rows(tape.value(a))?;
    check_rows(tape.value(b))?;
    if tape.value(a).shape()[1] != tape.value(b).shape()[1] {
        return Err(Error::Shape {
            op: "similarity",
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(b).shape().to_vec(),
        });
    }
    let na = tape.normalize_rows(a, NORM_EPS)?;
    let nb = if a == b { na } else { tape.normalize_rows(b, NORM_EPS)? };
    let cos = tape.matmul_bt(na, nb)?;
    tape.scale(cos, 1.0 / tau)
}

fn paired_rows(tape: &Tape, x: Var, y: Var) -> Result<usize> {
    let (sx, sy) = (tape.value(x).shape(), tape.value(y).shape());
    if sx != sy {
        return Err(Error::Shape {
            op: "contrastive pair",
            lhs: sx.to_vec(),
            rhs: sy.to_vec(),
        });
    }
    if sx.len() != 2 {
        return Err(Error::contract(format!("embeddings must be N×p, got {sx:?}")));
    }
    Ok(sx[0])
}

/// Symmetric intra-modal NT-Xent over the `2N` embeddings `[x; y]`.
///
/// `(x_i, y_i)` is the positive pair; every other embedding of the batch is
/// a negative. With `include_positive` the positive similarity is part of
/// the denominator; without it the denominator holds only the `2(N−1)`
/// negatives.
fn nt_xent_var(tape: &mut Tape, x: Var, y: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let n = paired_rows(tape, x, y)?;
    let both = tape.concat_rows(&[x, y])?;
    let logits = cosine_logits(tape, both, both, tau)?;
    let m = 2 * n;
    let targets: Vec<usize> = (0..m).map(|r| (r + n) % m).collect();
    let mut mask = vec![true; m * m];
    for r in 0..m {
        mask[r * m + r] = false;
        if !include_positive {
            mask[r * m + targets[r]] = false;
        }
    }
    tape.cross_entropy_rows(logits, &targets, &mask)
}

pub fn intra_loss_var(tape: &mut Tape, z_hat: Var, z_aug: Var, tau: f64) -> Result<Var> {
    if paired_rows(tape, z_hat, z_aug)? == 0 {
        return Err(Error::Empty("intra_loss"));
    }
    nt_xent_var(tape, z_hat, z_aug, tau, true)
}

pub fn equimod_loss_var(tape: &mut Tape, z_hat: Var, z_aug: Var, tau: f64) -> Result<Var> {
    if paired_rows(tape, z_hat, z_aug)? < 2 {
        return Err(Error::contract(
            "equimod loss is degenerate for N < 2: the denominator has no negatives",
        ));
    }
    nt_xent_var(tape, z_hat, z_aug, tau, false)
}

/// Symmetric cross-modal InfoNCE over the `N×N` similarity matrix.
pub fn inter_loss_var(tape: &mut Tape, za: Var, zv: Var, tau: f64) -> Result<Var> {
    let n = paired_rows(tape, za, zv)?;
    let logits = cosine_logits(tape, za, zv, tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n * n];
    let a2v = tape.cross_entropy_rows(logits, &targets, &mask)?;
    let cols = tape.transpose(logits)?;
    let v2a = tape.cross_entropy_rows(cols, &targets, &mask)?;
    tape.weighted_sum(&[(a2v, 0.5), (v2a, 0.5)])
}

/// Weighted sum of the three components as a tape node.
pub fn total_loss_var(tape: &mut Tape, inter: Var, intra_a: Var, intra_v: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(&[(inter, w.inter), (intra_a, w.intra_a), (intra_v, w.intra_v)])
}

fn eager<F>(x: &Tensor, y: &Tensor, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let (xv, yv) = (tape.input(x.clone()), tape.input(y.clone()));
    let out = f(&mut tape, xv, yv)?;
    Ok(tape.value(out).values()[0])
}

pub fn intra_loss(z_hat: &Tensor, z_aug: &Tensor, tau: f64) -> Result<f64> {
    eager(z_hat, z_aug, |t, x, y| intra_loss_var(t, x, y, tau))
}

pub fn equimod_loss(z_hat: &Tensor, z_aug: &Tensor, tau: f64) -> Result<f64> {
    eager(z_hat, z_aug, |t, x, y| equimod_loss_var(t, x, y, tau))
}

pub fn inter_loss(za: &Tensor, zv: &Tensor, tau: f64) -> Result<f64> {
    eager(za, zv, |t, x, y| inter_loss_var(t, x, y, tau))
}

pub fn total_loss(components: LossComponents, w: &LossWeights) -> Result<LossOutput> {
    let c = components;
    if ![c.inter, c.intra_a, c.intra_v].iter().all(|v| v.is_finite()) {
        return Err(Error::contract(format!("non-finite loss components {c:?}")));
    }
    Ok(LossOutput {
        total: w.inter * c.inter + w.intra_a * c.intra_a + w.intra_v * c.intra_v,
        components: c,
    })
}

/// Derivatives of the per-anchor losses with respect to the positive
/// similarity `s_pos`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientFactor {
    /// With the positive in the denominator.
    pub d_with_positive: f64,
    /// Negatives-only denominator.
    pub d_without_positive: f64,
    /// `Σ s_n / (s_pos + Σ s_n)`, the ratio between the two.
    pub factor: f64,
}

/// Closed-form derivatives of `−log(s_p / (s_p + Σ s_n))` and
/// `−log(s_p / Σ s_n)` with respect to `s_p`.
pub fn gradient_factor_check(s_pos: f64, s_negs: &[f64]) -> Result<GradientFactor> {
    if s_negs.is_empty() {
        return Err(Error::contract("gradient factor needs at least one negative"));
    }
    if !(s_pos > 0.0) || s_negs.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::contract("similarities must be positive"));
    }
    let neg: f64 = s_negs.iter().sum();
    let d_without_positive = -1.0 / s_pos;
    let d_with_positive = -neg / (s_pos * (s_pos + neg));
    Ok(GradientFactor {
        d_with_positive,
        d_without_positive,
        factor: neg / (s_pos + neg),
    })
}

/// The same two derivatives obtained by differentiating the implemented
/// loss kernel on the tape.
pub fn gradient_factor_autodiff(s_pos: f64, s_negs: &[f64]) -> Result<GradientFactor> {
    let closed = gradient_factor_check(s_pos, s_negs)?;
    let n = 1 + s_negs.len();
    let mut vals = vec![s_pos];
    vals.extend_from_slice(s_negs);
    let d = |include_positive: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.input(Tensor::new(vec![1, n], vals.clone())?.with_requires_grad(true));
        let logits = tape.log(s)?;
        let mut mask = vec![true; n];
        mask[0] = include_positive;
        let l = tape.cross_entropy_rows(logits, &[0], &mask)?;
        let g = tape.backward(l)?;
        Ok(g.wrt(s).expect("input requires grad")[0])
    };
    let with = d(true)?;
    let without = d(false)?;
    Ok(GradientFactor {
        d_with_positive: with,
        d_without_positive: without,
        factor: closed.factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![n, p], (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn similarity_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let s = similarity_matrix(&a, &a, 0.07).unwrap();
        assert!((s.get(0, 0) - (1.0f64 / 0.07).exp()).abs() < 1e-9 * s.get(0, 0));
        assert!((s.get(0, 1) - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 8, &mut rng);
        let b = random(3, 8, &mut rng);
        let s = similarity_matrix(&a, &b, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = (cos(a.row(i), b.row(j)) / 0.5).exp();
                assert!((s.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_rows_are_degenerate() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(similarity_matrix(&a, &a, 0.1), Err(Error::DegenerateEmbedding(1))));
    }

    #[test]
    fn single_item_batches() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![-0.5, 2.0]]).unwrap();
        assert_eq!(intra_loss(&a, &b, 0.07).unwrap(), 0.0);
        assert_eq!(inter_loss(&a, &b, 0.07).unwrap(), 0.0);
        assert!(matches!(equimod_loss(&a, &b, 0.07), Err(Error::Contract(_))));
    }

    #[test]
    fn two_item_inter_closed_form() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let tau = 0.07;
        let e = (1.0f64 / tau).exp();
        let expected = -(e / (e + 1.0)).ln();
        assert!((inter_loss(&z, &z, tau).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 6, &mut rng);
        let b = random(4, 6, &mut rng);
        let tau = 0.2;
        let base = [
            intra_loss(&a, &b, tau).unwrap(),
            inter_loss(&a, &b, tau).unwrap(),
            equimod_loss(&a, &b, tau).unwrap(),
        ];
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let rescale = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..4).map(|i| t.row(i).iter().map(|v| v * (1.5 + i as f64)).collect()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        for (pa, pb) in [(permute(&a), permute(&b)), (rescale(&a), rescale(&b))] {
            let got = [
                intra_loss(&pa, &pb, tau).unwrap(),
                inter_loss(&pa, &pb, tau).unwrap(),
                equimod_loss(&pa, &pb, tau).unwrap(),
            ];
            for (x, y) in got.iter().zip(base) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!((inter_loss(&b, &a, tau).unwrap() - base[1]).abs() < 1e-12);
    }

    #[test]
    fn equimod_is_strictly_smaller_and_can_go_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..6 {
            let a = random(n, 5, &mut rng);
            let b = random(n, 5, &mut rng);
            assert!(equimod_loss(&a, &b, 0.07).unwrap() < intra_loss(&a, &b, 0.07).unwrap());
        }
        // near-identical positives, orthogonal negatives
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.01, 0.0, 0.0], vec![0.01, 1.0, 0.0, 0.0]]).unwrap();
        assert!(equimod_loss(&a, &b, 0.07).unwrap() < 0.0);
        assert!(intra_loss(&a, &b, 0.07).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let c = LossComponents {
            inter: 0.5,
            intra_a: 1.25,
            intra_v: 2.0,
        };
        assert_eq!(total_loss(c, &LossWeights::default()).unwrap().total, 3.75);
        assert_eq!(total_loss(c, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap().total, 0.5);
        assert_eq!(total_loss(c, &LossWeights::new(1.0, 2.0, 2.0).unwrap()).unwrap().total, 7.0);
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn gradient_factor_unit_case() {
        let g = gradient_factor_check(1.0, &[1.0]).unwrap();
        assert_eq!(g.d_without_positive, -1.0);
        assert_eq!(g.factor, 0.5);
        assert_eq!(g.d_with_positive, -0.5);
        assert!(gradient_factor_check(1.0, &[]).is_err());
        let ad = gradient_factor_autodiff(1.0, &[1.0]).unwrap();
        assert!((ad.d_with_positive + 0.5).abs() < 1e-12);
        assert!((ad.d_without_positive + 1.0).abs() < 1e-12);
    }

    /// Direct enumeration over every anchor and every candidate.
    fn nt_xent_oracle(x: &Tensor, y: &Tensor, tau: f64, include_positive: bool) -> f64 {
        let n = x.shape()[0];
        let all: Vec<&[f64]> = (0..n).map(|i| x.row(i)).chain((0..n).map(|i| y.row(i))).collect();
        let mut total = 0.0;
        for a in 0..2 * n {
            let pos = (a + n) % (2 * n);
            let s = |b: usize| (cos(all[a], all[b]) / tau).exp();
            let mut denom = 0.0;
            for b in 0..2 * n {
                if b != a && (include_positive || b != pos) {
                    denom += s(b);
                }
            }
            total += -(s(pos) / denom).ln();
        }
        total / (2 * n) as f64
    }

    fn inter_oracle(a: &Tensor, v: &Tensor, tau: f64) -> f64 {
        let n = a.shape()[0];
        let s = |i: usize, j: usize| (cos(a.row(i), v.row(j)) / tau).exp();
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| s(i, j)).sum();
            let col: f64 = (0..n).map(|j| s(j, i)).sum();
            total += -(s(i, i) / row).ln() - (s(i, i) / col).ln();
        }
        total / (2 * n) as f64
    }

    #[test]
    fn losses_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..7 {
            let a = random(n, 7, &mut rng);
            let b = random(n, 7, &mut rng);
            let tau = rng.gen_range(0.05..1.0);
            let got = intra_loss(&a, &b, tau).unwrap();
            let want = nt_xent_oracle(&a, &b, tau, true);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{n}: {got} vs {want}");
            let got = inter_loss(&a, &b, tau).unwrap();
            let want = inter_oracle(&a, &b, tau);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
            if n >= 2 {
                let got = equimod_loss(&a, &b, tau).unwrap();
                let want = nt_xent_oracle(&a, &b, tau, false);
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_properties(seed in 0u64..10_000, n in 2usize..6, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(n, 4, &mut rng);
            let b = random(n, 4, &mut rng);
            let intra = intra_loss(&a, &b, tau).unwrap();
            let inter = inter_loss(&a, &b, tau).unwrap();
            proptest::prop_assert!(intra >= 0.0 && inter >= 0.0);
            proptest::prop_assert!(equimod_loss(&a, &b, tau).unwrap() < intra);
            proptest::prop_assert!((intra - intra_loss(&b, &a, tau).unwrap()).abs() < 1e-10);
            proptest::prop_assert!((inter - inter_loss(&b, &a, tau).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn gradient_factor_relation(s_pos in 1e-3f64..1e3, negs in proptest::collection::vec(1e-3f64..1e3, 1..20)) {
            let g = gradient_factor_check(s_pos, &negs).unwrap();
            let rel = (g.d_with_positive - g.d_without_positive * g.factor).abs() / g.d_with_positive.abs();
            proptest::prop_assert!(rel <= 1e-12);
            proptest::prop_assert!(g.factor > 0.0 && g.factor < 1.0);
            let ad = gradient_factor_autodiff(s_pos, &negs).unwrap();
            proptest::prop_assert!((ad.d_with_positive - g.d_with_positive).abs() <= 1e-9 * g.d_with_positive.abs());
            proptest::prop_assert!((ad.d_without_positive - g.d_without_positive).abs() <= 1e-9 * g.d_without_positive.abs());
        }
    }
}
