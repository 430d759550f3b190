//! Dense row-major tensors and the forward kernels shared with the tape.
//!
//! All reductions run left-to-right over the flat index so that repeated
//! evaluations are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("shape {shape:?} has a zero axis")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).ok_or(Error::Empty("from_rows"))?;
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows and columns of a matrix view: all leading axes fold into rows.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.values.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.as_matrix();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims(self, "matmul")?;
        let (k2, n) = matrix_dims(other, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.values, &other.values, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.values.clone();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.values[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Normalizes over the last axis, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.as_matrix();
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let x = &self.values[r * cols..(r + 1) * cols];
            let (mean, inv_std) = mean_inv_std(x, eps);
            for c in 0..cols {
                out[r * cols + c] = gamma.values[c] * ((x[c] - mean) * inv_std) + beta.values[c];
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Arithmetic mean over the token (first) axis of a `tokens × d` matrix.
    pub fn mean_pool(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "mean_pool expects tokens×d, got {:?}",
                self.shape
            )));
        }
        let (rows, cols) = self.as_matrix();
        let mut out = vec![0.0; cols];
        group_mean_into(&self.values, &mut out, rows, cols);
        Tensor::new(vec![cols], out)
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape
        )));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out += a[m×k] · b[k×n]`, accumulating each entry in increasing `k`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Two-pass mean and reciprocal standard deviation of one slice.
pub(crate) fn mean_inv_std(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Mean of `rows` consecutive rows of width `cols` into `out`.
pub(crate) fn group_mean_into(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    let inv = 1.0 / rows as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap().values(), a.values());
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        assert_eq!(x.matmul(&y).unwrap().values(), &[12.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.values()[i * 7 + p] * b.values()[p * 3 + j];
                }
                assert!((c.values()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 6], &mut rng);
        let b = random(&[5, 6], &mut rng);
        let mut bt = vec![0.0; 30];
        for i in 0..5 {
            for j in 0..6 {
                bt[j * 5 + i] = b.values()[i * 6 + j];
            }
        }
        let mut out = vec![0.0; 20];
        matmul_bt_into(a.values(), b.values(), &mut out, 4, 6, 5);
        let direct = a.matmul(&Tensor::new(vec![6, 5], bt).unwrap()).unwrap();
        for (x, y) in out.iter().zip(direct.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax(0).unwrap();
        for v in t.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap().softmax(0).unwrap();
        assert_eq!(t.values(), &[0.5, 0.5]);
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in t.values().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random(&[2, 3, 4], &mut rng).softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| t.values()[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(t.softmax(3).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let x = Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap();
        assert_eq!(x.layer_norm(&one, &zero, 1e-6).unwrap().values(), &[0.0; 3]);

        let beta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 4.0, -2.0]).unwrap();
        assert_eq!(x.layer_norm(&zero, &beta, 1e-6).unwrap().values(), beta.values());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 16], &mut rng);
        let y = x.layer_norm(&Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-12).unwrap();
        let mean = y.values().iter().sum::<f64>() / 16.0;
        let var = y.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mean_pool_cases() {
        let t = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.mean_pool().unwrap().values(), t.values());
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.mean_pool().unwrap().values(), &[1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random(&[16, 64], &mut rng);
        let p = t.mean_pool().unwrap();
        for c in 0..64 {
            let s: f64 = (0..16).map(|r| t.values()[r * 64 + c]).sum::<f64>() / 16.0;
            assert!((p.values()[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_token_input_is_rejected() {
        assert!(Tensor::new(vec![0, 4], vec![]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    fn matrix(rows: usize, cols: usize, seed: u64, range: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed: u64) {
            let s = matrix(rows, cols, seed, 50.0).softmax(1).unwrap();
            for r in 0..rows {
                let row = s.row(r);
                proptest::prop_assert!(row.iter().all(|&p| p >= 0.0));
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6, seed: u64) {
            let a = matrix(m, k, seed, 1.0);
            let b = matrix(k, n, seed ^ 1, 1.0);
            let c = matrix(n, p, seed ^ 2, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.values().iter().zip(right.values()) {
                proptest::prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }
}
