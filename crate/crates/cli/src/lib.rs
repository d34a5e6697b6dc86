//! Command-line driver for dialmem: config handling, synthetic corpora and
//! the `synth`, `train`, `generate`, `evaluate` and `gradcheck` commands.

pub mod commands;
pub mod config;
pub mod exit;
pub mod synth;
