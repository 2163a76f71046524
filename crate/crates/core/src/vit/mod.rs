//! Vision transformer whose GELU activations and attention rows are gated by
//! trainable switches.
//!
//! A GELU switch `c` blends `c·GELU(x) + (1−c)·x`; an attention-row switch
//! `s` blends the softmax row with a polynomial surrogate row
//! (`s·softmax + (1−s)·taylor`). At `c, s ∈ {0, 1}` the blends reduce to one
//! branch exactly.

mod attention;
mod checkpoint;
mod config;
mod forward;
mod params;
mod switches;

pub use attention::{
    scale_attention, softmax_attention, squared_attention, switched_attention, switched_gelu,
    taylor_attention, uniform_attention, AttentionWeights,
};
pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, read_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{AttentionVariant, GeluGranularity, ModelConfig, LAYERNORM_EPS};
pub use forward::{bind_params, bind_switches, patchify, vit_forward, Model, SwitchVars};
pub use params::{LayerParams, ModelParams, Params};
pub use switches::{MaskSelection, SwitchSet};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum VitError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("switch set does not match model config: {0}")]
    SwitchShape(String),
    #[error("model switches are not binarized")]
    NotBinarized,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
