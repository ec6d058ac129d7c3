//! Remote-sensing super-resolution transformer built on a small reverse-mode
//! autodiff engine.
//!
//! The network couples windowed self-attention with two extra attention
//! forms: each local window cross-attends to its best-matching strided
//! (contextual) window, and each group fuses its output with its input
//! through channel-wise cross-stage attention.

pub mod checkpoint;
pub mod config;
pub mod csffb;
pub mod cspia;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod lsab;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod real;
pub mod resample;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use engine::{Gradients, Rows, Tape, Var};
pub use error::{CheckpointError, Error, Result};
pub use real::Real;
pub use tensor::Tensor;
