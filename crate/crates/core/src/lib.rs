//! Workbench for studying modality bias in bimodal sequence recognition.
//!
//! The crate builds a small but complete pipeline around a synthetic
//! audio-visual corpus: a tape-based autodiff engine, a dual-branch
//! encoder-decoder with CTC and attention heads, training recipes for
//! dropout augmentation, teacher-student distillation and low-rank adapters,
//! and evaluation instruments (error-rate degradation curves, relative error
//! rates against a reference model, latent-representation similarity).
//!
//! Everything is deterministic: random draws come from named counter-based
//! streams, reductions run in fixed order, and artifacts round-trip through
//! explicit little-endian binary formats.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod format;
pub mod forward;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
