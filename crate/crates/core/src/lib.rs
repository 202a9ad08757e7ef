//! Memory-efficient LoRA training on a pruned toy transformer.
//!
//! The crate implements the full train-small/serve-big loop at desk scale:
//! prune a byte-level decoder-only transformer (structured, semi-structured,
//! or unstructured), optionally continue pretraining the pruned model so it
//! stays aligned with the original, optionally quantize it to 4-bit blocks,
//! train low-rank adapters against the frozen pruned base, then recover the
//! adapters to the original geometry and merge them into the unpruned model.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`adam`], [`gradcheck`] — the numeric substrate:
//!   dense f32/f64 tensors, reverse-mode autodiff, the optimizer, and
//!   finite-difference verification.
//! - [`model`] — the toy transformer (RMSNorm, SwiGLU, causal attention,
//!   byte tokenizer) and its LoRA adapters.
//! - [`prune`] — masks, structured plans, compaction and its inverse.
//! - [`quant`] — 4-bit block quantization (nf4 / int4sym codebooks).
//! - [`loram`] — the training stages and the end-to-end pipeline.
//! - [`eval`] — perplexity, memory accounting, adapter-norm diagnostics,
//!   ablation reports.
//! - [`corpus`] — deterministic synthetic corpora.
//! - [`container`] — the LMCK1 artifact file format.
//! - [`config`] — TOML run configuration.

pub mod adam;
pub mod config;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loram;
pub mod model;
pub mod prune;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
