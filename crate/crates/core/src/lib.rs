//! Cross-lingual sentence-encoder pre-training with hierarchical contrastive
//! objectives, plus the downstream fine-tuning paths (classification and
//! translation with similarity-fused logits).
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — tensors, the reverse-mode tape, Adam, gradient checking
//! - [`corpus`] — vocabulary, synthetic bilingual corpora, masking, batches
//! - [`encoder`] — the transformer encoder with aggregation and projection
//! - [`objectives`] — language-model, sentence-level, and word-level losses
//! - [`trainer`] — the multi-task pre-training loop and checkpointing
//! - [`nmt`] — encoder-decoder fine-tuning, beam search, and BLEU
//!
//! Everything is deterministic given its seeds: the same config and corpus
//! bytes reproduce training bit-exactly.

pub mod corpus;
pub mod encoder;
mod error;
pub mod nmt;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
