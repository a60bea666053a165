//! Parameter-efficient fine-tuning of a small masked-language-model encoder:
//! low-rank adapters, hard-template prompts with verbalizers, and both
//! combined, plus trainable-parameter accounting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod prompt;
pub mod scenario;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
