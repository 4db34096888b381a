use std::collections::HashMap;

use super::config::{AdjacencyMode, ModelConfig};
use super::layers::{
    encode_bidirectional, global_attention, predict_head, AttentionWeights, CellWeights,
    GateWeights, HeadWeights,
};
use super::params::{ModelParams, DIRECTIONS};
use crate::error::{Error, Result};
use crate::graph::{augmented_operator, learned_adjacency, Graph};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters registered as leaves on a tape, looked up by name.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn register<T: Real>(
        tape: &mut Tape<T>,
        params: &ModelParams<T>,
        requires_grad: bool,
    ) -> Self {
        let order: Vec<(String, Var)> = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars {
            vars: order.iter().cloned().collect(),
            order,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// `(name, var)` pairs in parameter storage order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// The full forecasting network bound to a configuration and road graph.
#[derive(Clone, Copy, Debug)]
pub struct Network<'a> {
    config: &'a ModelConfig,
    graph: &'a Graph,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig, graph: &'a Graph) -> Result<Self> {
        config.validate()?;
        if config.n_nodes != graph.n_nodes() {
            return Err(Error::Config(format!(
                "model has {} nodes, graph has {}",
                config.n_nodes,
                graph.n_nodes()
            )));
        }
        Ok(Network { config, graph })
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    /// `I + Ã` for the configured adjacency mode; `None` in identity mode.
    pub fn spatial_operator<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
    ) -> Result<Option<Var>> {
        let adj = match self.config.adjacency_mode {
            AdjacencyMode::Identity => return Ok(None),
            AdjacencyMode::PredefinedOnly => tape.constant(self.graph.row_normalized()),
            AdjacencyMode::SemiAutonomous => {
                let mask = tape.constant(self.graph.adjacency());
                let e = vars.get("node_embedding")?;
                learned_adjacency(tape, e, Some(mask), self.config.adjacency_combine)?
            }
            AdjacencyMode::AdaptiveOnly => {
                let e = vars.get("node_embedding")?;
                learned_adjacency(tape, e, None, self.config.adjacency_combine)?
            }
        };
        augmented_operator(tape, adj).map(Some)
    }

    /// Gate weights for one direction (`"fwd"` or `"rev"`).
    pub fn cell_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        dir: &str,
    ) -> Result<CellWeights> {
        let mut gate = |name: &str| -> Result<GateWeights> {
            if self.config.uses_embedding() {
                let e = vars.get("node_embedding")?;
                let w = vars.get(&format!("{dir}.{name}.weight_pool"))?;
                let b = vars.get(&format!("{dir}.{name}.bias_pool"))?;
                GateWeights::from_pools(tape, e, w, b)
            } else {
                Ok(GateWeights::Shared {
                    weight: vars.get(&format!("{dir}.{name}.weight"))?,
                    bias: vars.get(&format!("{dir}.{name}.bias"))?,
                })
            }
        };
        Ok(CellWeights {
            update: gate("update")?,
            reset: gate("reset")?,
            candidate: gate("candidate")?,
        })
    }

    pub fn attention_weights<T: Real>(&self, vars: &ParamVars) -> Result<AttentionWeights<T>> {
        let pair = |p: &str| -> Result<(Var, Var)> {
            Ok((
                vars.get(&format!("attn.{p}.weight"))?,
                vars.get(&format!("attn.{p}.bias"))?,
            ))
        };
        Ok(AttentionWeights {
            query: pair("query")?,
            key: pair("key")?,
            value: pair("value")?,
            norm_gain: vars.get("attn.norm.gain")?,
            norm_bias: vars.get("attn.norm.bias")?,
            eps: T::lit(self.config.norm_eps),
        })
    }

    /// Encoder output `[B,N,T,D]` before attention.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let op = self.spatial_operator(tape, vars)?;
        let fwd = self.cell_weights(tape, vars, DIRECTIONS[0])?;
        let rev = if self.config.use_reverse {
            Some(self.cell_weights(tape, vars, DIRECTIONS[1])?)
        } else {
            None
        };
        encode_bidirectional(tape, x, op, self.config.gcn_layers, &fwd, rev.as_ref())
    }

    /// Maps `x: [B,T,N,C]` (normalised) to forecasts `[B,N,T,1]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let mut h = self.encode(tape, vars, x)?;
        if self.config.use_attention {
            let w = self.attention_weights(vars)?;
            h = global_attention(tape, h, &w)?.0;
        }
        let head = HeadWeights {
            weight: vars.get("head.weight")?,
            bias: vars.get("head.bias")?,
            mode: self.config.head,
        };
        predict_head(tape, h, &head)
    }

    /// Gradient-free forward pass on plain tensors.
    pub fn predict<T: Real>(&self, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = self.config;
        if shape.len() != 4
            || shape[1] != c.horizon
            || shape[2] != c.n_nodes
            || shape[3] != c.input_dim
        {
            return Err(Error::dim(
                "forward",
                shape,
                &[
                    shape.first().copied().unwrap_or(0),
                    c.horizon,
                    c.n_nodes,
                    c.input_dim,
                ],
            ));
        }
        Ok(())
    }
}
