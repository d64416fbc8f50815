//! Triplet-loss family for two-modality embedding matching, with selective
//! hard-negative mining, manual-backprop encoders, gradient-vanishing
//! diagnostics and Recall@K evaluation.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); training
//! and diagnostics run in `f64` through the aliases below.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod graddiag;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type SimMatrix = losses::SimMatrix<f64>;
pub type LossHyper = losses::LossHyper<f64>;
pub type LossResult = losses::LossResult<f64>;
