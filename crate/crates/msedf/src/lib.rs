//! Multi-stream encoder-decoder image captioning.
//!
//! This crate implements a complete desk-scale captioning system with no
//! external ML framework: a small tape-based autodiff engine, the trainable
//! layers of a dual-encoder / stacked-GRU captioner, four strategies for
//! aggregating stacked decoder outputs, training with Adam and ROUGE-L early
//! stopping, beam-search decoding with comparison-based reranking, and the
//! usual caption evaluation metrics (BLEU-1..4, METEOR, ROUGE-L, CIDEr).
//!
//! See the `examples/` directory for runnable walkthroughs of each major
//! capability, and the `msedf` binary for the command-line surface.

pub mod cli;
pub mod data;
mod error;
pub mod fusion;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod stacking;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
