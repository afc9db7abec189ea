//! Distributed operator inference.
//!
//! Snapshot data are split by rows across ranks. Each rank contributes a
//! Gram block; the summed Gram matrix yields the reduced coordinates without
//! forming the POD basis, and a regularized quadratic reduced model is fitted
//! by a grid search spread over the ranks.

pub mod bench;
pub mod comm;
pub mod dimred;
pub mod error;
pub mod linalg;
pub mod opinf;
pub mod pipeline;
pub mod postproc;
pub mod repro;
pub mod rollout;
pub mod scalar;
mod sidecar;
pub mod snapshot_store;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use scalar::Real;

pub type Matrix = Mat<f64>;
pub type Matrix32 = Mat<f32>;
