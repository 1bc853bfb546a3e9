//! The Amamba and Amamba-MoE encoders, the per-variant blocks built from
//! them, and closed-form cost accounting.

mod blocks;
mod config;
mod cost;
mod encoders;

pub use blocks::{Block, ChannelMixer, SequenceMixer, StandardLayer, UamBlockParams};
pub use config::{jamba_layout, ModelConfig, Variant};
pub use cost::{block_flops, block_parameter_count, cost_report, count_flops, count_parameters, match_parameter_budget, CostReport};
pub use encoders::{AmambaMoeParams, AmambaParams};
