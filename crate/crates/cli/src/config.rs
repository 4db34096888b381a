use std::path::{Path, PathBuf};

use mstfgrn::data::{gen_synthetic, load_flow, FlowSeries, NormMode, SynthConfig};
use mstfgrn::graph::{load_edge_list, load_edge_list_with_ids, load_node_ids, Graph};
use mstfgrn::model::ModelConfig;
use mstfgrn::train::{ablation_factory, gru_baseline, TrainConfig, Variant};
use mstfgrn::{DType, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// The graph-recurrent network with learned adjacency.
    #[default]
    Mstfgrn,
    /// Unidirectional recurrent baseline without graph mixing or attention.
    Gru,
}

/// Where the flow series and road graph come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub edges: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub node_ids: Option<PathBuf>,
    /// `topology:nodes:steps`, generated from the run seed.
    pub synthetic: Option<String>,
}

impl DataSource {
    pub fn is_empty(&self) -> bool {
        self.flows.is_none() && self.synthetic.is_none()
    }

    pub fn load(&self, seed: u64) -> Result<(Graph, FlowSeries)> {
        if let Some(spec) = &self.synthetic {
            return gen_synthetic(&SynthConfig::parse_shorthand(spec)?, seed);
        }
        let flows = self
            .flows
            .as_deref()
            .ok_or_else(|| Error::Config("give --flows (with --edges) or --synthetic".into()))?;
        let edges = self
            .edges
            .as_deref()
            .ok_or_else(|| Error::Config("--edges is required with --flows".into()))?;
        let mut series = load_flow(flows)?;
        let graph = match &self.node_ids {
            Some(p) => {
                let ids = load_node_ids(p)?;
                series.node_ids = Some(ids.clone());
                load_edge_list_with_ids(edges, Some(&ids))?
            }
            None => load_edge_list(edges, series.n_nodes())?,
        };
        if graph.n_nodes() != series.n_nodes() {
            return Err(Error::Config(format!(
                "graph has {} nodes but the flow series has {}",
                graph.n_nodes(),
                series.n_nodes()
            )));
        }
        Ok((graph, series))
    }
}

/// Everything needed to reproduce a run; written to `<out>/config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub data: DataSource,
    pub model_kind: ModelKind,
    pub variant: Variant,
    /// Resolved network configuration (`n_nodes` filled in from the data).
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub repeats: usize,
    pub split: [f64; 3],
    pub norm: NormMode,
    pub dtype: DType,
    pub out: PathBuf,
}

impl RunConfig {
    /// Applies the model kind and ablation variant to `model` for `n_nodes`.
    pub fn resolve_model(&mut self, n_nodes: usize) -> Result<()> {
        let mut m = ModelConfig {
            n_nodes,
            ..self.model.clone()
        };
        m = ablation_factory(&m, self.variant);
        if self.model_kind == ModelKind::Gru {
            m = gru_baseline(&m);
        }
        m.validate()?;
        self.model = m;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| io_err(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Seed of repeat `k`; a single run uses the configured seed directly.
    pub fn repeat_seed(&self, k: usize) -> u64 {
        if self.repeats <= 1 {
            self.train.seed
        } else {
            mstfgrn::rng::SeedStreams::new(self.train.seed)
                .child(&format!("repeat-{k}"))
                .seed()
        }
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
