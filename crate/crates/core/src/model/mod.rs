//! A small decoder-only transformer with maskable residual branches.
//!
//! Each block applies `h' = h + Attn(norm(h))` then `h = h' + FFN(norm(h'))`.
//! The norms sit inside the branches, so masking a branch leaves the block
//! as the exact identity on the skip path. Embedding, final norm and head
//! are never masked.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

use std::fmt;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::{example_loss, loss_and_grad};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub(crate) use forward::argmax_among;
pub use forward::{
    attention_branch, attention_weights, embed, ffn_branch, final_logits, forward,
    forward_unmasked, head, AblationMask,
};
pub use params::{init, BlockParams, Parameters};
pub use train::{train, AdamState, TrainConfig, TrainError, TrainOutcome, TrainPoint};

/// Floating point type the forward pass can run in.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn lit(x: f64) -> Self;
}

impl Scalar for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn lit(x: f64) -> Self {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Evaluation in single precision; training and gradients stay in f64.
    F32,
    #[default]
    F64,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("mask covers {got} sublayers, model has {expected}")]
    MaskMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture and initialisation seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 32,
            n_blocks: 3,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 16,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if 2 * self.n_blocks > crate::coalition::MAX_PLAYERS {
            return Err(ModelError::Config(format!(
                "{} blocks give more than {} sublayers",
                self.n_blocks,
                crate::coalition::MAX_PLAYERS
            )));
        }
        Ok(())
    }

    /// Two maskable sublayers per block.
    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
