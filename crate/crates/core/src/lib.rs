#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` is how NaN gets rejected
//! Normalization layers and the signal-propagation diagnostics used to study
//! them at initialization: variance growth across residual blocks, stable rank
//! and cosine similarity of deep features, and layerwise gradient explosion.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod net;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DimSet, Rng, Tensor};
