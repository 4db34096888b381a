use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::{HeadMode, ModelConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) const DIRECTIONS: [&str; 2] = ["fwd", "rev"];
pub(crate) const GATES: [&str; 3] = ["update", "reset", "candidate"];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

/// Name and shape of one learnable array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

fn layout(config: &ModelConfig) -> Vec<(ParamSpec, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        out.push((ParamSpec { name, shape }, init));
    };
    let (n, c, f, d, t) = (
        config.n_nodes,
        config.input_dim,
        config.hidden_dim,
        config.embed_dim,
        config.horizon,
    );
    let fan_in = c + f;
    if config.uses_embedding() {
        push(
            "node_embedding".into(),
            vec![n, d],
            Init::Normal(config.embed_init_std),
        );
    }
    let dirs = if config.use_reverse { 2 } else { 1 };
    for dir in &DIRECTIONS[..dirs] {
        for gate in GATES {
            if config.uses_embedding() {
                let bound = 1.0 / ((d * fan_in) as f64).sqrt();
                push(
                    format!("{dir}.{gate}.weight_pool"),
                    vec![d, fan_in, f],
                    Init::Uniform(bound),
                );
                push(format!("{dir}.{gate}.bias_pool"), vec![d, f], Init::Zeros);
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                push(
                    format!("{dir}.{gate}.weight"),
                    vec![fan_in, f],
                    Init::Uniform(bound),
                );
                push(format!("{dir}.{gate}.bias"), vec![f], Init::Zeros);
            }
        }
    }
    let width = config.feature_width();
    let xavier = |fi: usize, fo: usize| Init::Uniform((6.0 / (fi + fo) as f64).sqrt());
    if config.use_attention {
        let k = config.key_dim();
        for (proj, out_w) in [("query", k), ("key", k), ("value", width)] {
            push(
                format!("attn.{proj}.weight"),
                vec![width, out_w],
                xavier(width, out_w),
            );
            push(format!("attn.{proj}.bias"), vec![out_w], Init::Zeros);
        }
        push("attn.norm.gain".into(), vec![width], Init::Ones);
        push("attn.norm.bias".into(), vec![width], Init::Zeros);
    }
    match config.head {
        HeadMode::Flatten => {
            push(
                "head.weight".into(),
                vec![t * width, t],
                xavier(t * width, t),
            );
            push("head.bias".into(), vec![t], Init::Zeros);
        }
        HeadMode::PerStep => {
            push("head.weight".into(), vec![width, 1], xavier(width, 1));
            push("head.bias".into(), vec![1], Init::Zeros);
        }
    }
    out
}

/// Every learnable array of a network, in a fixed order with unique names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ModelParams<T> {
    /// Parameter names and shapes implied by `config`, in storage order.
    pub fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
        layout(config).into_iter().map(|(s, _)| s).collect()
    }

    /// Randomly initialised parameters.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for (spec, init) in layout(config) {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
                Init::Uniform(b) => (0..numel)
                    .map(|_| T::lit(rng.random_range(-b..=b)))
                    .collect(),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..numel).map(|_| T::lit(normal.sample(rng))).collect()
                }
            };
            entries.push((spec.name, Tensor::new(spec.shape, data)?));
        }
        Ok(ModelParams { entries })
    }

    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            entries: Self::specs(config)
                .into_iter()
                .map(|s| (s.name, Tensor::zeros(s.shape)))
                .collect(),
        })
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{}`",
                w[0]
            )));
        }
        Ok(ModelParams { entries })
    }

    /// Fails unless names and shapes match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = Self::specs(config);
        if specs.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.entries) {
            if spec.name != *name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected `{}` {:?}, found `{}` {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Concatenation of every parameter in storage order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Contract(format!(
                "flat vector has {} values, parameters hold {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::AdjacencyMode;
    use crate::rng::SeedStreams;

    #[test]
    fn names_are_unique_and_shapes_follow_config() {
        let cfg = ModelConfig::new(5);
        let p = ModelParams::<f32>::init(&cfg, &mut SeedStreams::new(1).rng("init")).unwrap();
        let mut names: Vec<_> = p.names().collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert_eq!(p.get("node_embedding").unwrap().shape(), &[5, 10]);
        assert_eq!(
            p.get("fwd.update.weight_pool").unwrap().shape(),
            &[10, 65, 64]
        );
        assert_eq!(p.get("rev.candidate.bias_pool").unwrap().shape(), &[10, 64]);
        assert_eq!(p.get("attn.query.weight").unwrap().shape(), &[128, 128]);
        assert_eq!(p.get("head.weight").unwrap().shape(), &[12 * 128, 12]);
        assert!(p
            .get("attn.norm.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 1.0));
        assert!(p
            .get("fwd.reset.bias_pool")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn init_respects_bounds() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            embed_dim: 3,
            ..ModelConfig::new(4)
        };
        let p = ModelParams::<f64>::init(&cfg, &mut SeedStreams::new(2).rng("init")).unwrap();
        let bound = 1.0 / ((3 * 9) as f64).sqrt();
        assert!(p
            .get("fwd.update.weight_pool")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        let e = p.get("node_embedding").unwrap().data();
        let std = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
        assert!(std > 0.02 && std < 0.3, "{std}");
    }

    #[test]
    fn predefined_only_has_shared_weights_and_no_embedding() {
        let cfg = ModelConfig {
            adjacency_mode: AdjacencyMode::PredefinedOnly,
            ..ModelConfig::new(4)
        };
        let specs = ModelParams::<f32>::specs(&cfg);
        assert!(specs.iter().all(|s| s.name != "node_embedding"));
        let w = specs
            .iter()
            .find(|s| s.name == "fwd.update.weight")
            .unwrap();
        assert_eq!(w.shape, vec![65, 64]);
    }

    #[test]
    fn flatten_roundtrip_and_check() {
        let cfg = ModelConfig {
            hidden_dim: 4,
            embed_dim: 2,
            horizon: 3,
            ..ModelConfig::new(3)
        };
        let mut p = ModelParams::<f32>::init(&cfg, &mut SeedStreams::new(3).rng("init")).unwrap();
        let flat = p.flatten();
        let orig = p.clone();
        p.unflatten(&flat).unwrap();
        assert_eq!(p, orig);
        p.check_against(&cfg).unwrap();
        let other = ModelConfig {
            use_attention: false,
            ..cfg
        };
        assert!(p.check_against(&other).is_err());
    }
}
