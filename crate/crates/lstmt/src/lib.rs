//! LSTM-T: a two-layer LSTM video captioner with temporal attention,
//! two-stream late fusion, self-critical fine-tuning, and the caption
//! metrics needed to evaluate it.
//!
//! Everything runs on f64 with a small tape-based reverse-mode
//! differentiation engine; see [`tape`]. Model math lives in [`model`],
//! training in [`training`], generation in [`decoding`], metrics in
//! [`metrics`], and file formats in [`data`].

pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
