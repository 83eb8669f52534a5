//! Few-shot incremental event detection.
//!
//! Builds the multi-round N-way K-shot benchmark from a mention corpus,
//! trains knowledge-enhanced models round by round with exemplar replay and
//! hybrid distillation, and scores them with per-round F1 matrices,
//! aged-class curves and the forgetting rate.

pub mod adaptation;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod knowledge;
pub mod memory;
pub mod objectives;
pub mod protocol;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
