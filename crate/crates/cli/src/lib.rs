//! Experiment runner behind the `proctrain` binary.

pub mod config;
pub mod replicate;
pub mod report;
