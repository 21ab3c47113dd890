//! Certified defenses against adversarial patch and sparse attacks.
//!
//! The crate trains small image classifiers whose robustness is provable by
//! interval bound propagation, certifies them by exhaustively sweeping patch
//! placements (or a sparse-pixel bound), and attacks models empirically with
//! masked IFGSM, optionally through a Local Gradient Smoothing preprocessing
//! defense. A certificate is a per-label margin lower bound that stays
//! nonnegative for every feasible perturbed input.

pub mod attack;
pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod interval;
pub mod network;
pub mod ops;
pub mod optim;
pub mod predictor;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod threat;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
