//! AdamW, plain SGD, and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam_eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Moment estimates for one list of parameter tensors.
///
/// Moments are allocated lazily on the first step and must then keep
/// matching the tensor shapes passed in.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam update:
    ///
    /// ```text
    /// m ← β1 m + (1 − β1) g
    /// v ← β2 v + (1 − β2) g²
    /// p ← p − lr · (m̂ / (√v̂ + eps) + wd · p)
    /// ```
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[&Matrix<T>], lr: T) -> Result<()> {
        check_pairs("adamw_step", params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
            return Err(Error::shape(
                "adamw_step",
                "tensor list matching previous steps",
                format!("{} tensors", grads.len()),
            ));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (eps, wd) = (T::of(c.eps), T::of(c.weight_decay));
        let t = self.t as i32;
        let bc1 = T::one() - T::of(c.beta1.powi(t));
        let bc2 = T::one() - T::of(c.beta2.powi(t));
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, p) in p.as_mut_slice().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// `p ← p − lr · g`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Matrix<T>], grads: &[&Matrix<T>], lr: T) -> Result<()> {
    check_pairs("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

fn check_pairs<T: Scalar>(op: &'static str, params: &[&mut Matrix<T>], grads: &[&Matrix<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            op,
            format!("{} gradient tensors", params.len()),
            format!("{}", grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(op, g)?;
    }
    Ok(())
}

/// Constant rate, divided by `decay_factor` from `decay_epoch` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    /// Equal to `total_epochs` for no decay.
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            base_lr,
            total_epochs,
            decay_epoch: total_epochs,
            decay_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.decay_epoch > self.total_epochs {
            return Err(Error::config(
                "decay_epoch",
                format!("{} exceeds total epochs {}", self.decay_epoch, self.total_epochs),
            ));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::config("decay_factor", format!("must be > 0, got {}", self.decay_factor)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::config(
                "epoch",
                format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs),
            ));
        }
        Ok(if epoch < self.decay_epoch {
            self.base_lr
        } else {
            self.base_lr / self.decay_factor
        })
    }
}
