//! Parameter-importance analysis of modality fine-tuning.
//!
//! A small pre-RMSNorm transformer is pretrained on synthetic text tasks and
//! then taught to read "speech" (continuous feature frames fed through an
//! adaptor). The crate measures which parameters matter for each modality and
//! how fine-tuning strategies move that importance:
//!
//! - [`tensor`]: f64 tensors with a tape-based reverse-mode [`Graph`];
//! - [`model`]: the transformer, speech adaptor, LoRA adapters and checkpoints;
//! - [`data`]: deterministic key-value, copy and toy-QA tasks in both modalities;
//! - [`importance`]: first-order `|g·θ|` scores, exact nullification, masks,
//!   rank clustering and layer profiles;
//! - [`training`]: full fine-tuning, layer-wise learning rates and LoRA arms;
//! - [`report`]: CSV, Markdown, SVG and 16-bit PGM artifacts with provenance;
//! - [`cli`]: the `parashift` command-line pipeline.

pub mod cli;
pub mod data;
pub mod error;
pub mod importance;
pub mod model;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
