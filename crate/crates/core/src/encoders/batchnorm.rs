//! Batch normalization over rows with an exact backward pass.
//!
//! The forward pass never mutates the layer; running statistics are folded
//! in afterwards from the cache with [`BatchNorm::update_running`], so the
//! same parameters can be re-evaluated freely (finite differences, eval).

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

use super::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
    pub eps: T,
    pub momentum: T,
}

/// Everything the backward pass and the running-stat update need.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub mode: Mode,
    pub x_hat: Matrix<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    /// Batch mean and biased batch variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub rows: usize,
}

impl<T: Scalar> BatchNorm<T> {
    /// γ = 1, β = 0, running mean 0, running variance 1.
    pub fn new(features: usize, eps: T, momentum: T) -> Self {
        Self {
            gamma: Matrix::filled(1, features, T::one()),
            beta: Matrix::zeros(1, features),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, T::one()),
            eps,
            momentum,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.cols()
    }

    /// Folds batch statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = T::from_count(cache.rows);
        let unbias = if cache.rows > 1 { n / (n - T::one()) } else { T::one() };
        let m = self.momentum;
        let keep = T::one() - m;
        for c in 0..self.features() {
            let rm = &mut self.running_mean.as_mut_slice()[c];
            *rm = keep * *rm + m * cache.batch_mean[c];
            let rv = &mut self.running_var.as_mut_slice()[c];
            *rv = keep * *rv + m * cache.batch_var[c] * unbias;
        }
    }
}

/// `y = γ (x − μ) / √(σ² + eps) + β` per column.
///
/// Train mode normalizes with the batch mean and biased batch variance;
/// eval mode with the running estimates.
pub fn batchnorm_forward<T: Scalar>(x: &Matrix<T>, bn: &BatchNorm<T>, mode: Mode) -> Result<(Matrix<T>, BnCache<T>)> {
    let (rows, cols) = x.shape();
    if cols != bn.features() {
        return Err(Error::shape(
            "batchnorm_forward",
            format!("{} features", bn.features()),
            format!("{cols} features"),
        ));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch norm in train mode needs at least 2 rows, got {rows}"
                )));
            }
            column_moments(x)
        }
        Mode::Eval => (bn.running_mean.as_slice().to_vec(), bn.running_var.as_slice().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
    let gamma = bn.gamma.as_slice();
    let beta = bn.beta.as_slice();
    let mut x_hat = Matrix::zeros(rows, cols);
    let mut y = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let h = (x[(r, c)] - mean[c]) * inv_std[c];
            x_hat[(r, c)] = h;
            y[(r, c)] = gamma[c] * h + beta[c];
        }
    }
    let (batch_mean, batch_var) = match mode {
        Mode::Train => (mean, var),
        Mode::Eval => (Vec::new(), Vec::new()),
    };
    Ok((
        y,
        BnCache {
            mode,
            x_hat,
            inv_std,
            gamma: gamma.to_vec(),
            batch_mean,
            batch_var,
            rows,
        },
    ))
}

/// Returns `(d_x, d_γ, d_β)`.
///
/// In train mode the gradient flows through the batch mean and variance:
/// `d_x = inv_std / n · (n·d_x̂ − Σ d_x̂ − x̂ · Σ(d_x̂ x̂))` with `d_x̂ = γ d_y`.
pub fn batchnorm_backward<T: Scalar>(d_y: &Matrix<T>, cache: &BnCache<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    cache.x_hat.check_same_shape("batchnorm_backward", d_y)?;
    let (rows, cols) = d_y.shape();
    let mut d_gamma = Matrix::zeros(1, cols);
    let mut d_beta = Matrix::zeros(1, cols);
    // column sums of d_x̂ and d_x̂ · x̂
    let mut sum_dxh = vec![T::zero(); cols];
    let mut sum_dxh_xh = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let dy = d_y[(r, c)];
            let xh = cache.x_hat[(r, c)];
            d_gamma.as_mut_slice()[c] += dy * xh;
            d_beta.as_mut_slice()[c] += dy;
            let dxh = dy * cache.gamma[c];
            sum_dxh[c] += dxh;
            sum_dxh_xh[c] += dxh * xh;
        }
    }
    let mut d_x = Matrix::zeros(rows, cols);
    match cache.mode {
        Mode::Train => {
            let n = T::from_count(rows);
            for r in 0..rows {
                for c in 0..cols {
                    let dxh = d_y[(r, c)] * cache.gamma[c];
                    let xh = cache.x_hat[(r, c)];
                    d_x[(r, c)] = cache.inv_std[c] / n * (n * dxh - sum_dxh[c] - xh * sum_dxh_xh[c]);
                }
            }
        }
        Mode::Eval => {
            for r in 0..rows {
                for c in 0..cols {
                    d_x[(r, c)] = d_y[(r, c)] * cache.gamma[c] * cache.inv_std[c];
                }
            }
        }
    }
    Ok((d_x, d_gamma, d_beta))
}

/// Column means and biased variances.
fn column_moments<T: Scalar>(x: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let (rows, cols) = x.shape();
    let n = T::from_count(rows);
    let mut mean = vec![T::zero(); cols];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x[(r, c)] - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}
