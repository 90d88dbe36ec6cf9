//! A desk-scale laboratory for KV-cache-compressing attention mechanisms.
//!
//! The crate provides, bottom up:
//! - [`tensor`]: a dense `f64` matrix engine with reverse-mode autodiff
//!   and finite-difference gradient checking;
//! - [`quant`]: symmetric sub-channel integer quantization with
//!   straight-through gradients and bit-exact packing;
//! - [`attention`]: one attention stack covering MHA, MQA/GQA, CLA, MLA
//!   and cross-layer latent attention (CLLA) with three sharing modes,
//!   plus the quantized-latent variant;
//! - [`cache`]: the incremental-decoding KV cache, byte-exact memory
//!   accounting, and a stable serialization format;
//! - [`model`]: a toy decoder-only transformer, its training loop,
//!   synthetic corpora, and checkpointing.
//!
//! Everything is deterministic given its seeds and runs on a single core.

pub mod attention;
pub mod cache;
pub mod error;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
