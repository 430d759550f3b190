//! Runtime self-check of the contrastive losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use equivar_core::losses::{equimod_loss, gradient_factor_autodiff, gradient_factor_check, intra_loss, inter_loss};
use equivar_core::numerics::Tensor;
use equivar_core::Result;

const DRAWS: usize = 1000;
const BATCHES: usize = 100;

#[derive(Debug, Serialize)]
pub struct Report {
    pub draws: usize,
    pub max_closed_form_residual: f64,
    pub max_autodiff_err: f64,
    pub factor_in_unit_interval: bool,
    pub batches: usize,
    pub max_oracle_err: f64,
    pub with_positive_exceeds_without: bool,
    pub passed: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean over the `2N` anchors of `[x; y]`; the positive of anchor `i` is
/// `(i + N) mod 2N`.
fn paired_oracle(x: &[Vec<f64>], y: &[Vec<f64>], tau: f64, keep_positive: bool) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let m = all.len();
    let mut sum = 0.0;
    for a in 0..m {
        let p = (a + m / 2) % m;
        let s = |b: usize| (cosine(all[a], all[b]) / tau).exp();
        let denom: f64 = (0..m).filter(|&b| b != a && (keep_positive || b != p)).map(s).sum();
        sum -= (s(p) / denom).ln();
    }
    sum / m as f64
}

fn cross_oracle(a: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let s = |i: usize, j: usize| (cosine(&a[i], &v[j]) / tau).exp();
    let mut sum = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j)).sum();
        let col: f64 = (0..n).map(|j| s(j, i)).sum();
        sum -= 0.5 * ((s(i, i) / row).ln() + (s(i, i) / col).ln());
    }
    sum / n as f64
}

fn close(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn run(seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut residual, mut ad_err, mut unit) = (0.0f64, 0.0f64, true);
    for _ in 0..DRAWS {
        let s_pos = 10f64.powf(rng.gen_range(-3.0..3.0));
        let k = rng.gen_range(1..=32);
        let negs: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.gen_range(-3.0..3.0))).collect();
        let g = gradient_factor_check(s_pos, &negs)?;
        residual = residual.max(close(g.d_with_positive, g.d_without_positive * g.factor));
        unit &= g.factor > 0.0 && g.factor < 1.0;
        let ad = gradient_factor_autodiff(s_pos, &negs)?;
        ad_err = ad_err
            .max(close(ad.d_with_positive, g.d_with_positive))
            .max(close(ad.d_without_positive, g.d_without_positive));
    }

    let (mut oracle_err, mut ordered) = (0.0f64, true);
    for b in 0..BATCHES {
        let n = 1 + b % 4;
        let p = rng.gen_range(2..10);
        let tau = rng.gen_range(0.05..1.0);
        let mut draw = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let (x, y) = (draw(), draw());
        let (tx, ty) = (Tensor::from_rows(&x)?, Tensor::from_rows(&y)?);
        let intra = intra_loss(&tx, &ty, tau)?;
        oracle_err = oracle_err
            .max(close(intra, paired_oracle(&x, &y, tau, true)))
            .max(close(inter_loss(&tx, &ty, tau)?, cross_oracle(&x, &y, tau)));
        if n >= 2 {
            let eq = equimod_loss(&tx, &ty, tau)?;
            oracle_err = oracle_err.max(close(eq, paired_oracle(&x, &y, tau, false)));
            ordered &= intra > eq;
        }
    }

    let passed = residual <= 1e-12 && ad_err <= 1e-8 && unit && oracle_err <= 1e-12 && ordered;
    Ok(Report {
        draws: DRAWS,
        max_closed_form_residual: residual,
        max_autodiff_err: ad_err,
        factor_in_unit_interval: unit,
        batches: BATCHES,
        max_oracle_err: oracle_err,
        with_positive_exceeds_without: ordered,
        passed,
    })
}
