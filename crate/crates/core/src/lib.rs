//! Multi-level adaptive contrastive learning (MACL) for knowledge-grounded
//! dialogue generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: dialogue examples, tokenization, JSONL I/O and the synthetic
//!   corpus generator.
//! - [`metrics`]: knowledge-regurgitation metrics (LCS, PLCS, Dup-n, KP-n,
//!   PoD, KUD) and corpus reports.
//! - [`autograd`]: a small reverse-mode tape over dense `f64` matrices.
//! - [`model`]: a toy transformer encoder-decoder exposing per-step
//!   distributions and pooled representations.
//! - [`losses`]: MLE, unlikelihood, token-level contrastive and sequence-level
//!   InfoNCE objectives.
//! - [`decoding`] and [`sampling`]: beam/greedy/nucleus decoding and group
//!   beam search hard-negative mining.
//! - [`trainer`]: degenerator and MACL training loops.

pub mod autograd;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
