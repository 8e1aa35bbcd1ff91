//! Iterative magnitude-based pruning of a tiny transformer encoder, with
//! alignment-preserving weight regularizers (cosine and Frobenius) and a
//! synthetic multi-domain zero-shot transfer harness.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors and a reverse-mode tape.
//! - [`encoder`]: the encoder model, its prunable layers and checkpoints.
//! - [`pruning`]: scoring criteria, mask selection and the geometric schedule.
//! - [`alignreg`]: alignment regularizers, their gradients and spectral checks.
//! - [`harness`]: synthetic languages, pretraining, fine-pruning, evaluation.
//! - [`reporting`]: CSV/SVG artifacts, grid orchestration, CLI and self-checks.

pub mod alignreg;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod pruning;
pub mod reporting;
pub mod tensor;

pub use error::{Error, Result};
