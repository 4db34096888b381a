use serde::{Deserialize, Serialize};

use super::series::FlowSeries;
use crate::error::{Error, Result};

/// Granularity of the z-score statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One mean and std per channel, pooled over every node.
    #[default]
    Global,
    /// One mean and std per node and channel.
    PerNode,
}

/// Z-score statistics fitted on a training series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    mode: NormMode,
    n_nodes: usize,
    channels: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Normalizer {
    /// Fits on `train`. A zero standard deviation is replaced by 1.
    pub fn fit(train: &FlowSeries, mode: NormMode) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract(
                "cannot fit a normalizer on an empty series".into(),
            ));
        }
        let (n, c) = (train.n_nodes(), train.channels());
        let groups = match mode {
            NormMode::Global => c,
            NormMode::PerNode => n * c,
        };
        let group = |node: usize, ch: usize| match mode {
            NormMode::Global => ch,
            NormMode::PerNode => node * c + ch,
        };
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for t in 0..train.len() {
            for node in 0..n {
                for ch in 0..c {
                    sum[group(node, ch)] += train.get(t, node, ch);
                    count[group(node, ch)] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, k)| s / *k as f64).collect();
        let mut sq = vec![0.0; groups];
        for t in 0..train.len() {
            for node in 0..n {
                for ch in 0..c {
                    let g = group(node, ch);
                    sq[g] += (train.get(t, node, ch) - mean[g]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, k)| {
                let v = (s / *k as f64).sqrt();
                if v > 0.0 && v.is_finite() {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer {
            mode,
            n_nodes: n,
            channels: c,
            mean,
            std,
        })
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn group(&self, node: usize, channel: usize) -> usize {
        match self.mode {
            NormMode::Global => channel,
            NormMode::PerNode => node * self.channels + channel,
        }
    }

    pub fn normalize(&self, value: f64, node: usize, channel: usize) -> f64 {
        let g = self.group(node, channel);
        (value - self.mean[g]) / self.std[g]
    }

    pub fn denormalize(&self, value: f64, node: usize, channel: usize) -> f64 {
        let g = self.group(node, channel);
        value * self.std[g] + self.mean[g]
    }

    /// Per-node `(std, mean)` of channel 0, used to map model outputs back to flow units.
    pub fn target_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.n_nodes)
            .map(|n| {
                let g = self.group(n, 0);
                (self.std[g], self.mean[g])
            })
            .unzip()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn global_stats_pool_nodes() {
        let s = FlowSeries::new(2, 2, 1, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let n = Normalizer::fit(&s, NormMode::Global).unwrap();
        assert_eq!(n.mean(), &[4.0]);
        assert!((n.std()[0] - 5f64.sqrt()).abs() < 1e-12);
        let p = Normalizer::fit(&s, NormMode::PerNode).unwrap();
        assert_eq!(p.mean(), &[3.0, 5.0]);
        assert_eq!(p.std(), &[2.0, 2.0]);
    }

    #[test]
    fn constant_series_gets_unit_std() {
        let s = FlowSeries::new(3, 1, 1, vec![5.0; 3]).unwrap();
        let n = Normalizer::fit(&s, NormMode::Global).unwrap();
        assert_eq!(n.std(), &[1.0]);
        assert_eq!(n.normalize(5.0, 0, 0), 0.0);
    }

    proptest! {
        #[test]
        fn roundtrip(vals in prop::collection::vec(-1e4f64..1e4, 6..60), x in -1e5f64..1e5) {
            let l = vals.len() / 2;
            let s = FlowSeries::new(l, 2, 1, vals[..l * 2].to_vec()).unwrap();
            for mode in [NormMode::Global, NormMode::PerNode] {
                let n = Normalizer::fit(&s, mode).unwrap();
                prop_assert!(n.std().iter().all(|&v| v > 0.0));
                for node in 0..2 {
                    let back = n.denormalize(n.normalize(x, node, 0), node, 0);
                    prop_assert!((back - x).abs() <= 1e-5 * x.abs().max(1.0));
                }
            }
        }
    }
}
