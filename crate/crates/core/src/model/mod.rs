//! The multi-stage network: one encoder stage followed by decoder stages that
//! refine the previous stage's class probabilities.

mod config;
mod forward;
mod params;

pub use config::{default_attn_dim, ModelConfig};
pub use forward::{
    decoder_forward, dxformer_forward, dxformer_forward_with, encoder_forward, final_logits,
    predict, ModelOutput, StageOutput,
};
pub use params::{layout, stage_prefix, BoundParams, ParameterSet};
