//! Enrollment-conditioned masked speech pre-training and CTC-based
//! target speech recognition, small enough to train on a desk machine.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`]: f64 tensors with reverse-mode autodiff.
//! - [`audio`], [`features`], [`corpus`]: WAV I/O, log-mel features, and
//!   a deterministic synthetic speaker corpus.
//! - [`labeler`]: K-means pseudo-labels over frame features.
//! - [`mixer`]: speaker-aware overlap simulation and enrollment picks.
//! - [`model`]: CNN encoder, two-stream fusion, Transformer with gated
//!   relative position bias, prediction heads.
//! - [`adapters`]: Add/FiLM/cLN speaker-adaptation layers.
//! - [`objectives`]: mask policy, masked cross-entropy, CTC, WER.
//! - [`trainer`]: pre-training/fine-tuning loops, checkpoints, eval.

pub mod adapters;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod features;
pub mod labeler;
pub mod mixer;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
