//! The forecasting network: adaptive graph convolution inside a GRU-style
//! cell, run in both time directions, followed by per-node temporal
//! self-attention and a linear multi-step head.

mod checkpoint;
mod config;
mod layers;
mod network;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_checkpoint_config, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{AdjacencyMode, HeadMode, ModelConfig};
pub use layers::{
    adaptive_gcn, encode_bidirectional, global_attention, predict_head, stfgrn_cell,
    AttentionWeights, CellWeights, GateWeights, HeadWeights,
};
pub use network::{Network, ParamVars};
pub use params::{ModelParams, ParamSpec};
