//! Activations, normalizations and affine maps together with their
//! hand-written reverse-mode rules.

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Softmax of a slice with max-subtraction.
pub fn softmax_slice<T: Scalar>(xs: &[T], out: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_slice(m.row(r), out.row_mut(r));
    }
    out
}

pub fn softmax_cols<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    softmax_rows(&m.transpose()).transpose()
}

/// Given `y = softmax_rows(x)` and `dy`, returns `dx`.
pub fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *d = a * (b - inner);
        }
    }
    dx
}

pub fn softmax_cols_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    softmax_rows_backward(&y.transpose(), &dy.transpose()).transpose()
}

pub fn sigmoid<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(scalar::sigmoid)
}

pub fn tanh<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(crate::scalar::tanh)
}

/// `dx = dy · (1 − y²)` for `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    y.zip_map(dy, |y, d| d * (T::one() - y * y))
}

/// `dx = dy · y(1 − y)` for `y = σ(x)`.
pub fn sigmoid_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    y.zip_map(dy, |y, d| d * y * (T::one() - y))
}

/// Row-wise affine map `x · Wᵀ + b` with `W: out × in`, `b: 1 × out`.
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    let y = x.matmul_t(w)?;
    match b {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

/// Accumulates `dW += dyᵀ·x` (and `db += Σ dy`), returns `dx = dy·W`.
pub fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: Option<&mut Matrix<T>>,
) -> Result<Matrix<T>> {
    dw.add_assign(&dy.t_matmul(x)?)?;
    if let Some(db) = db {
        db.add_assign(&dy.col_sums())?;
    }
    dy.matmul(w)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved statistics of a row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let (rows, cols) = x.shape();
    if gain.shape() != (1, cols) || bias.shape() != (1, cols) {
        return Err(Error::shape("layer_norm", "gain/bias width"));
    }
    let n = T::lit(cols as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut normalized = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in normalized.row_mut(r).iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut y = normalized.clone();
    for r in 0..rows {
        for ((o, &g), &b) in y.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    dy: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
) -> Result<Matrix<T>> {
    let xhat = &cache.normalized;
    dgain.add_assign(&xhat.hadamard(dy)?.col_sums())?;
    dbias.add_assign(&dy.col_sums())?;
    let (rows, cols) = dy.shape();
    let n = T::lit(cols as f64);
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        for ((d, &g), &v) in dxhat.iter_mut().zip(gain.data()).zip(dy.row(r)) {
            *d = g * v;
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum::<T>() / n;
        let inv = cache.inv_std[r];
        for ((o, &d), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
            *o = inv * (d - mean_d - xh * mean_dx);
        }
    }
    Ok(dx)
}
