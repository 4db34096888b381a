use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{EvalReport, Metrics};
use crate::error::{Error, Result};
use crate::model::{AdjacencyMode, ModelConfig};

/// The full model and its four component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNodeEmbedding,
    NoAdjacencyMatrix,
    NoReverse,
    NoAttention,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoNodeEmbedding,
        Variant::NoAdjacencyMatrix,
        Variant::NoReverse,
        Variant::NoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNodeEmbedding => "no_node_embedding",
            Variant::NoAdjacencyMatrix => "no_adjacency_matrix",
            Variant::NoReverse => "no_reverse",
            Variant::NoAttention => "no_attention",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// `base` with one component removed.
pub fn ablation_factory(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut cfg = base.clone();
    match variant {
        Variant::Full => {}
        Variant::NoNodeEmbedding => cfg.adjacency_mode = AdjacencyMode::PredefinedOnly,
        Variant::NoAdjacencyMatrix => cfg.adjacency_mode = AdjacencyMode::AdaptiveOnly,
        Variant::NoReverse => cfg.use_reverse = false,
        Variant::NoAttention => cfg.use_attention = false,
    }
    cfg
}

/// Plain recurrent baseline: no graph mixing, one direction, no attention.
pub fn gru_baseline(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        adjacency_mode: AdjacencyMode::Identity,
        use_reverse: false,
        use_attention: false,
        ..base.clone()
    }
}

/// Mean and population standard deviation of repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: usize,
    pub mean: Metrics,
    pub std: Metrics,
    pub reports: Vec<EvalReport>,
}

pub fn summarize_repeats(reports: &[EvalReport]) -> Result<RepeatSummary> {
    if reports.is_empty() {
        return Err(Error::Contract("no runs to summarize".into()));
    }
    let n = reports.len() as f64;
    let pick = |f: fn(&Metrics) -> f64| {
        let vals: Vec<f64> = reports.iter().map(|r| f(&r.overall)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, std)
    };
    let (mae, mae_s) = pick(|m| m.mae);
    let (rmse, rmse_s) = pick(|m| m.rmse);
    let (mape, mape_s) = pick(|m| m.mape);
    Ok(RepeatSummary {
        runs: reports.len(),
        mean: Metrics { mae, rmse, mape },
        std: Metrics {
            mae: mae_s,
            rmse: rmse_s,
            mape: mape_s,
        },
        reports: reports.to_vec(),
    })
}
