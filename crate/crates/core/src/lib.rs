//! Vicinal risk minimisation toolkit: a small dense NN engine, Mixup-family
//! training, predictive-uncertainty scores and calibration/OOD metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;
pub mod vicinal;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Matrix;
