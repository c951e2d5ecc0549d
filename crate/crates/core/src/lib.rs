//! Spectral-Gram predictive uncertainty for generative answers.
//!
//! Answer embeddings of one prompt become a Gram eigenspectrum, and a
//! Gaussian-process classifier maps that spectrum to a calibrated
//! probability that the model answered correctly.

pub mod baselines;
pub mod embedder;
pub mod error;
pub mod gpc;
pub mod http;
pub mod judge;
pub mod linalg;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod quadrature;
pub mod records;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use gpc::{GpcModel, KernelSpec, Prediction};
pub use linalg::Matrix;
pub use pipeline::Method;
pub use records::GenerationRecord;
pub use spectral::SpectrumVector;

/// Crate version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
