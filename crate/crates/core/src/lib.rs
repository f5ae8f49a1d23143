//! Desk-scale laboratory for procedural pretraining of small decoder-only
//! transformers, checkpoint surgery, and diagnostic fine-tuning.

pub mod diagnostics;
pub mod episode;
pub mod error;
pub mod model;
pub mod procgen;
pub mod rng;
pub mod surgery;
pub mod store;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
