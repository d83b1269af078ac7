//! The full super-resolution network: shallow feature extraction, residual
//! groups of token aggregation and local attention, and a pixel-shuffle
//! reconstruction added to the bicubic upsample of the input.

pub mod complexity;
mod config;
mod model;

pub use complexity::multi_adds;
pub use config::{ModelConfig, KEYS as CONFIG_KEYS};
pub use model::{
    conv_ffn, conv_ffn_on, forward_on, lrsa_block_on, residual_group, residual_group_on, shallow_on,
    tab_forward, tab_mix_on, CenterMode, FfnWeights, GroupWeights, GroupingTrace, LrsaWeights, Model,
    ModelWeights, TabWeights,
};
