//! Hierarchical semantic aggregation for contrastive representation learning.
//!
//! Multi-positive momentum-contrast pretraining with kNN positive mining,
//! CutMix neighborhood expansion, and deep-supervised stage losses, plus the
//! matching evaluation protocols (kNN classifier, linear probe,
//! semi-supervised fine-tuning with entropy-filtered pseudo-labeling).
//!
//! Everything runs on the CPU on top of a small reverse-mode autodiff graph
//! (`numeric`); training uses `f32`, gradient checks and the loss oracles
//! use `f64`.

pub mod augment;
pub mod config;
pub mod contrast;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod miner;
pub mod numeric;
pub mod rng;

pub use error::{Error, Result};
