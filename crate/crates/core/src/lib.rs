//! Highway vehicle trajectory prediction with a hybrid LSTM/Transformer
//! encoder, occupancy-grid social context, and an LSTM decoder.
//!
//! The crate covers the whole pipeline: parsing raw vehicle records,
//! windowing them into grid-based samples, training with reverse-mode
//! gradients built from scratch, and per-step RMSE evaluation against a
//! constant-velocity physics baseline and a no-context LSTM ablation. A
//! deterministic synthetic traffic generator makes everything testable
//! without real recordings.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod social;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
