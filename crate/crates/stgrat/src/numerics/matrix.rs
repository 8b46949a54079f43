//! Dense row-major matrices and the elementary neural operations.
//!
//! Everything here is plain (non-differentiable) arithmetic; the
//! differentiable counterparts live in [`crate::numerics::tape`].

use crate::error::{Error, Result};
use rand::Rng;

/// A dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "ragged rows: expected {} columns, got {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64, op: &str) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}: {}x{} vs {}x{}",
                op, self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `out = a * b`, overwriting `out`. Shapes must already agree.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    out.data.fill(0.0);
    accumulate_matmul(a, b, out, 1.0);
}

/// `out += scale * a * b` with an i-k-j loop so the inner loop streams rows.
pub(crate) fn accumulate_matmul(a: &Matrix, b: &Matrix, out: &mut Matrix, scale: f64) {
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let f = aik * scale;
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += f * bv;
            }
        }
    }
}

/// `out += scale * a^T * b` without materializing the transpose.
pub(crate) fn accumulate_matmul_at_b(a: &Matrix, b: &Matrix, out: &mut Matrix, scale: f64) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (k, &ark) in a_row.iter().enumerate() {
            if ark == 0.0 {
                continue;
            }
            let f = ark * scale;
            let out_row = &mut out.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += f * bv;
            }
        }
    }
}

/// `out += scale * a * b^T` without materializing the transpose.
pub(crate) fn accumulate_matmul_a_bt(a: &Matrix, b: &Matrix, out: &mut Matrix, scale: f64) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc * scale;
        }
    }
}

/// Numerically stabilized softmax of a non-empty vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract("softmax: empty input".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// GELU in the exact-erf form, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Elementwise exact GELU.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

/// Normalizes `x` to zero mean and unit variance over the feature
/// dimension, then applies the affine gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("layer_norm: empty input".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm: input {} vs gain {} / bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: zeroes entries with probability `rate` and rescales
/// survivors by `1/(1-rate)` so the expectation is unchanged. Identity in
/// eval mode.
pub fn dropout(x: &Matrix, rate: f64, mode: DropoutMode, rng: &mut impl Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(x.map_with(|v| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            v * keep
        }
    }))
}

impl Matrix {
    fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Xavier (Glorot) uniform initialization on `[-b, b]` with
/// `b = sqrt(6 / (rows + cols))`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn softmax_uniform_on_constants() {
        let out = softmax(&[4.2, 4.2, 4.2]).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let out = softmax(&[0.0, 2.0f64.ln()]).unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let out = softmax(&[1000.0, 1000.0]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        // Phi(1) by Simpson integration of the standard normal density.
        let steps = 20_000;
        let (a, b) = (-12.0f64, 1.0f64);
        let h = (b - a) / steps as f64;
        let mut acc = normal_pdf(a) + normal_pdf(b);
        for k in 1..steps {
            let x = a + k as f64 * h;
            acc += normal_pdf(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let phi1 = acc * h / 3.0;
        assert!((gelu_scalar(1.0) - phi1).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_collapses_to_bias() {
        let out = layer_norm(&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        for v in out {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let out = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let out = layer_norm(&[1.0, 7.0], &[0.0, 0.0], &[2.5, -1.0], 1e-5).unwrap();
        assert_eq!(out, vec![2.5, -1.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::filled(4, 4, 3.0);
        let y = dropout(&x, 0.9, DropoutMode::Eval, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::filled(4, 4, 3.0);
        let y = dropout(&x, 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rate_one_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::filled(2, 2, 1.0);
        assert!(dropout(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000usize;
        let rate = 0.3;
        let x = Matrix::filled(n, 1, 1.0);
        let y = dropout(&x, rate, DropoutMode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        // Each output is Bernoulli(1-rate)/(1-rate): variance rate/(1-rate).
        let se = (rate / (1.0 - rate) / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * se,
            "mean {mean} deviates more than 3 se {se}"
        );
    }

    #[test]
    fn xavier_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = xavier_init(17, 13, &mut r1);
        let b = xavier_init(17, 13, &mut r2);
        assert_eq!(a, b);
        let bound = (6.0 / 30.0f64).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_variance_matches_uniform_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = xavier_init(1000, 1000, &mut rng);
        let n = m.len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // Uniform on [-b, b] has variance b^2/3 = 2/(rows+cols).
        let expected = 2.0 / 2000.0;
        assert!((var - expected).abs() / expected < 0.1);
    }
}
