//! Causality-aware empathetic dialogue toolkit.
//!
//! A desk-scale, from-first-principles implementation of a transformer
//! dialogue generator fused with a conditional variational graph
//! auto-encoder (CVGAE) that reasons cause-effect relations over a word-level
//! causal knowledge graph and feeds them to the decoder through a
//! multi-source attention mechanism.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//! - [`nn`]: transformer and graph-convolution building blocks
//! - [`graph`]: per-example prior/posterior causal-graph construction
//! - [`cvgae`]: conditional variational graph auto-encoder nets
//! - [`model`]: the full model assembly, losses, and generation
//! - [`data`]: corpus ingestion, tokenization, vocabulary, batching
//! - [`train`]: Adam, the Noam schedule, the training loop, perplexity
//! - [`metrics`]: corpus-level BLEU
//! - [`checkpoint`]: manifest + raw-blob parameter persistence

pub mod checkpoint;
pub mod convert;
pub mod cvgae;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{CareError, Result, TensorError};
