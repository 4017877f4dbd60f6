//! Temporal modeling for online action detection over pre-extracted unit features.
//!
//! The crate covers a small reverse-mode differentiation engine ([`autodiff`]),
//! the temporal operators and hybrid chains ([`model`]), windowed SGD training
//! ([`train`]), stride-1 online scoring ([`infer`]), per-frame AP / calibrated AP
//! ([`metrics`]), feature-stream files and a synthetic generator ([`data`]), and
//! the command pipeline used by the CLI ([`pipeline`]).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::{Matrix, Real};
