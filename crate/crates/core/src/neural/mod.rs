//! Minimal reverse-mode differentiable core and the prompt-conditioned
//! inverse-k-means model built on it.
//!
//! Everything runs in f64 on one thread, so a fixed seed gives a
//! bit-identical training trajectory. Checkpoints default to an f32 blob; an
//! f64 blob is available when exact reloads matter.

mod graph;
mod invk;
mod layers;
mod params;
mod ssim;

use thiserror::Error;

use crate::featureio::{FeatureError, FormatError};

pub use graph::{gelu, log_sum_exp, matmul, softmax_in_place, Graph, Tensor, Var};
pub use invk::{
    augment, loss_invk, train_invk, AugmentationPolicy, InvKConfig, InvKExample, InvKModel, LossParts,
    INVK_CHECKPOINT_KIND,
};
pub use layers::{causal_mask, rms_norm_row, sinusoidal, sinusoidal_row, BlockShape, LayerCache, Linear, TransformerBlock};
pub use params::{
    read_checkpoint, write_checkpoint, AdamW, Checkpoint, Dtype, Param, ParamId, ParamStore, TrainConfig,
    CHECKPOINT_MAGIC,
};
pub use ssim::{dynamic_range, ssim, ssim_graph, window_for, SSIM_WINDOW};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("backward called without a completed forward pass")]
    NoForward,
    #[error("loss must be a scalar, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token {token} at index {index} is out of range (limit {limit})")]
    TokenOutOfRange { index: usize, token: u32, limit: u32 },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}
