//! Experiment front-end for few-shot incremental event detection.

pub mod commands;
pub mod config;
pub mod failure;
pub mod plot;
