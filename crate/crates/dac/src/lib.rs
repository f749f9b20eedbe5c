//! Density-aware post-hoc confidence calibration.
//!
//! The pipeline operates entirely on file-exported classifier artifacts
//! (per-layer feature embeddings, logits, labels). Per-layer kth-nearest
//! neighbor distances against the training distribution act as density
//! proxies; a constrained linear combination of those proxies rescales
//! the logits sample-wise before an ordinary post-hoc calibrator runs.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod knn;
pub mod manifest;
pub mod metrics;
pub mod ops;
pub mod opt;
pub mod par;
pub mod report;
pub mod scaler;
pub mod synth;
pub mod tensor;

pub use error::{DacError, Result};
pub use tensor::DenseMatrix;
