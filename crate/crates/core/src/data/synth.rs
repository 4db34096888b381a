//! Seeded synthetic traffic corpus on a known topology.
//!
//! Node `i` carries a base level, a diurnal profile with a node-specific
//! phase, half the mean profile of its neighbours, and an autoregressive
//! disturbance that diffuses over the graph:
//!
//! ```text
//! s_i(t) = amp_i·(sin(ωt + φ_i) + 0.3·sin(2ωt + 2φ_i))
//! d(t)   = 0.9·P·d(t-1) + σ·ε(t)          P = row-normalised (I + A)
//! x_i(t) = base_i + s_i(t) + coupling·mean_{j~i} s_j(t) + d_i(t)
//! ```

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::series::FlowSeries;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::{SeedStreams, SYNTH};

/// Steps per simulated day at five-minute resolution.
pub const DIURNAL_PERIOD: usize = 288;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring,
    Grid,
    Erdos,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Topology::Ring),
            "grid" => Ok(Topology::Grid),
            "erdos" => Ok(Topology::Erdos),
            other => Err(Error::Config(format!(
                "unknown topology `{other}` (expected ring, grid or erdos)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub topology: Topology,
    pub base: f64,
    pub amplitude: f64,
    /// Relative spread of per-node base and amplitude; 0 makes nodes identical.
    pub heterogeneity: f64,
    pub coupling: f64,
    /// Innovation std of the diffusing disturbance; 0 gives the clean mixture.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 8,
            n_steps: 2000,
            topology: Topology::Ring,
            base: 300.0,
            amplitude: 100.0,
            heterogeneity: 0.2,
            coupling: 0.5,
            noise_std: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn new(topology: Topology, n_nodes: usize, n_steps: usize) -> Self {
        SynthConfig {
            topology,
            n_nodes,
            n_steps,
            ..Default::default()
        }
    }

    /// Parses the `topology:nodes:steps` shorthand, e.g. `ring:8:2000`.
    pub fn parse_shorthand(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let [topo, n, l] = parts.as_slice() else {
            return Err(Error::Config(format!(
                "synthetic corpus `{spec}` must look like topology:nodes:steps"
            )));
        };
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("synthetic corpus `{spec}`: bad {what} `{s}`")))
        };
        Ok(SynthConfig::new(
            topo.parse()?,
            num(n, "node count")?,
            num(l, "step count")?,
        ))
    }
}

fn grid_shape(n: usize) -> (usize, usize) {
    let rows = (n as f64).sqrt().floor().max(1.0) as usize;
    (rows, n.div_ceil(rows))
}

fn topology(cfg: &SynthConfig, rng: &mut crate::rng::Rng) -> Result<(Graph, Vec<f64>)> {
    let n = cfg.n_nodes;
    let (edges, phase): (Vec<(usize, usize)>, Vec<f64>) = match cfg.topology {
        Topology::Ring => (
            (0..n).map(|i| (i, (i + 1) % n)).collect(),
            (0..n).map(|i| TAU * i as f64 / n as f64).collect(),
        ),
        Topology::Grid => {
            let (rows, cols) = grid_shape(n);
            let mut edges = Vec::new();
            for i in 0..n {
                if (i % cols) + 1 < cols && i + 1 < n {
                    edges.push((i, i + 1));
                }
                if i + cols < n {
                    edges.push((i, i + cols));
                }
            }
            let span = (rows + cols) as f64;
            let phase = (0..n)
                .map(|i| TAU * ((i / cols) + (i % cols)) as f64 / span)
                .collect();
            (edges, phase)
        }
        Topology::Erdos => {
            let p = if n > 1 {
                (3.0 / (n - 1) as f64).min(1.0)
            } else {
                0.0
            };
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        edges.push((i, j));
                    }
                }
            }
            let phase = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
            (edges, phase)
        }
    };
    Ok((Graph::from_edges(n, &edges)?, phase))
}

/// Generates a graph and an `[L, N, 1]` flow series, deterministic in `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<(Graph, FlowSeries)> {
    if cfg.n_nodes == 0 || cfg.n_steps == 0 {
        return Err(Error::Config(
            "synthetic corpus needs nodes and steps".into(),
        ));
    }
    let mut rng = SeedStreams::new(seed).rng(SYNTH);
    let (graph, phase) = topology(cfg, &mut rng)?;
    let n = cfg.n_nodes;
    let mut jitter =
        |scale: f64| -> f64 { scale * (1.0 + cfg.heterogeneity * rng.random_range(-1.0..=1.0)) };
    let base: Vec<f64> = (0..n).map(|_| jitter(cfg.base)).collect();
    let amp: Vec<f64> = (0..n).map(|_| jitter(cfg.amplitude)).collect();

    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i).collect()).collect();
    let omega = TAU / DIURNAL_PERIOD as f64;
    let mut disturbance = vec![0.0; n];
    let mut values = Vec::with_capacity(cfg.n_steps * n);
    for t in 0..cfg.n_steps {
        let wt = omega * t as f64;
        let profile: Vec<f64> = (0..n)
            .map(|i| amp[i] * ((wt + phase[i]).sin() + 0.3 * (2.0 * wt + 2.0 * phase[i]).sin()))
            .collect();
        if cfg.noise_std > 0.0 {
            let prev = disturbance.clone();
            for i in 0..n {
                let spread = (prev[i] + neighbors[i].iter().map(|&j| prev[j]).sum::<f64>())
                    / (1 + neighbors[i].len()) as f64;
                let eps: f64 = StandardNormal.sample(&mut rng);
                disturbance[i] = 0.9 * spread + cfg.noise_std * eps;
            }
        }
        for i in 0..n {
            let nb = &neighbors[i];
            let coupled = if nb.is_empty() {
                0.0
            } else {
                nb.iter().map(|&j| profile[j]).sum::<f64>() / nb.len() as f64
            };
            values.push(base[i] + profile[i] + cfg.coupling * coupled + disturbance[i]);
        }
    }
    let mut series = FlowSeries::new(cfg.n_steps, n, 1, values)?;
    series.node_ids = Some((0..n).map(|i| i.to_string()).collect());
    Ok((graph, series))
}
