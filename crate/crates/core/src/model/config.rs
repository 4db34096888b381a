use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyCombine;

/// Source of the spatial propagation operator used inside every gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Learned weights from the node embedding combined with the road graph.
    #[default]
    SemiAutonomous,
    /// Row-normalised road graph only; no node embedding anywhere.
    PredefinedOnly,
    /// Learned weights only; the road graph is ignored.
    AdaptiveOnly,
    /// No spatial mixing and shared dense weights: a per-node plain GRU.
    Identity,
}

impl AdjacencyMode {
    pub fn uses_embedding(self) -> bool {
        matches!(
            self,
            AdjacencyMode::SemiAutonomous | AdjacencyMode::AdaptiveOnly
        )
    }
}

/// Shape of the final affine map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One map from the flattened `T x D` block of a node to all `T` outputs.
    #[default]
    Flatten,
    /// One `D -> 1` map shared across time steps.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Input window length, equal to the number of predicted steps.
    pub horizon: usize,
    pub gcn_layers: usize,
    pub use_reverse: bool,
    pub use_attention: bool,
    pub adjacency_mode: AdjacencyMode,
    pub adjacency_combine: AdjacencyCombine,
    pub head: HeadMode,
    /// Query/key width; `None` means the encoder feature width.
    pub key_dim: Option<usize>,
    pub norm_eps: f64,
    pub embed_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_nodes: 1,
            input_dim: 1,
            hidden_dim: 64,
            embed_dim: 10,
            horizon: 12,
            gcn_layers: 1,
            use_reverse: true,
            use_attention: true,
            adjacency_mode: AdjacencyMode::SemiAutonomous,
            adjacency_combine: AdjacencyCombine::Mask,
            head: HeadMode::Flatten,
            key_dim: None,
            norm_eps: 1e-5,
            embed_init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn new(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_nodes", self.n_nodes),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("horizon", self.horizon),
            ("gcn_layers", self.gcn_layers),
            ("key_dim", self.key_dim()),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Width of the encoder output: `2F'` bidirectional, `F'` otherwise.
    pub fn feature_width(&self) -> usize {
        if self.use_reverse {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim.unwrap_or_else(|| self.feature_width())
    }

    pub fn uses_embedding(&self) -> bool {
        self.adjacency_mode.uses_embedding()
    }
}
