//! Multi-prompt open-vocabulary detection on a synthetic shape world:
//! dual-encoder training with progressive prompt scheduling, decoupled
//! inference, post-processing cascades, few-shot tooling, evaluation and a
//! small data engine.

pub mod cli;
pub mod dataset;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod fsod;
pub mod geometry;
pub mod inference;
pub mod postproc;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
