//! The network, its parameters and the attention-rank diagnostic.

mod config;
mod network;
mod params;
mod posembed;
mod rank;

pub use config::ModelConfig;
pub use network::{
    downstream_forward, encode, grid_tensor, predict, ArVideoModel, Attention, AttentionRecord, DecoderBlock,
    EncoderBlock, Forward, Linear, Mlp, Norm,
};
pub use params::{Init, ModelParams, ParamId, ParamSpec};
pub use posembed::positional_embedding;
pub use rank::{
    attention_rank_report, numerical_rank, rank_report_csv, rank_tolerance, singular_values, LayerRank,
    DEFAULT_RANK_FACTOR,
};
