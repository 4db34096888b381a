use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::normalize::{NormMode, Normalizer};
use super::series::{chronological_split, FlowSeries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stride-1 `(input, target)` windows over one contiguous series.
///
/// Window `i` reads input steps `[i, i+T)` (normalized) and target steps
/// `[i+T, i+2T)` of channel 0 in raw units.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    split: Split,
    horizon: usize,
    raw: FlowSeries,
    normalized: Vec<f64>,
    normalizer: Arc<Normalizer>,
}

/// Model-ready tensors for a set of windows.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Normalized inputs `[B,T,N,C]`.
    pub x: Tensor<T>,
    /// Raw targets `[B,N,T,1]`.
    pub y: Tensor<T>,
}

pub fn make_windows(
    series: &FlowSeries,
    horizon: usize,
    normalizer: Arc<Normalizer>,
    split: Split,
) -> Result<WindowedDataset> {
    if horizon == 0 || series.len() < 2 * horizon {
        return Err(Error::Config(format!(
            "series of {} steps cannot host a window of {} + {horizon}",
            series.len(),
            horizon
        )));
    }
    if normalizer.channels() != series.channels() || normalizer.n_nodes() != series.n_nodes() {
        return Err(Error::dim(
            "make_windows",
            &[series.n_nodes(), series.channels()],
            &[normalizer.n_nodes(), normalizer.channels()],
        ));
    }
    let (n, c) = (series.n_nodes(), series.channels());
    let mut normalized = Vec::with_capacity(series.values().len());
    for t in 0..series.len() {
        for node in 0..n {
            for ch in 0..c {
                normalized.push(normalizer.normalize(series.get(t, node, ch), node, ch));
            }
        }
    }
    Ok(WindowedDataset {
        split,
        horizon,
        raw: series.clone(),
        normalized,
        normalizer,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.raw.len() + 1 - 2 * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.n_nodes()
    }

    pub fn channels(&self) -> usize {
        self.raw.channels()
    }

    pub fn normalizer(&self) -> &Arc<Normalizer> {
        &self.normalizer
    }

    pub fn series(&self) -> &FlowSeries {
        &self.raw
    }

    /// First series step read by window `i`'s input and one past its target.
    pub fn window_range(&self, i: usize) -> (usize, usize) {
        (i, i + 2 * self.horizon)
    }

    /// Normalized input value of window `i` at step `t`.
    pub fn input(&self, i: usize, t: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n_nodes(), self.channels());
        self.normalized[((i + t) * n + node) * c + channel]
    }

    /// Raw target of window `i` at horizon step `t`.
    pub fn target(&self, i: usize, t: usize, node: usize) -> f64 {
        self.raw.get(i + self.horizon + t, node, 0)
    }

    /// Raw channel-0 input of window `i` at step `t`.
    pub fn raw_input(&self, i: usize, t: usize, node: usize) -> f64 {
        self.raw.get(i + t, node, 0)
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let (n, c, t) = (self.n_nodes(), self.channels(), self.horizon);
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Contract(format!(
                "window {bad} out of range for {} windows",
                self.len()
            )));
        }
        let b = indices.len();
        let mut x = Vec::with_capacity(b * t * n * c);
        let mut y = Vec::with_capacity(b * n * t);
        for &i in indices {
            let start = i * n * c;
            x.extend(
                self.normalized[start..start + t * n * c]
                    .iter()
                    .map(|&v| T::lit(v)),
            );
        }
        for &i in indices {
            for node in 0..n {
                for s in 0..t {
                    y.push(T::lit(self.target(i, s, node)));
                }
            }
        }
        Ok(Batch {
            x: Tensor::new([b, t, n, c], x)?,
            y: Tensor::new([b, n, t, 1], y)?,
        })
    }

    /// Contiguous index batches of at most `size` windows in order.
    pub fn sequential_batches(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// The three windowed splits sharing one training-fitted normalizer.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub normalizer: Arc<Normalizer>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Standard deviation of the raw channel-0 flow over the whole series.
    pub fn flow_std(&self) -> f64 {
        let vals: Vec<f64> = [&self.train, &self.val, &self.test]
            .iter()
            .flat_map(|d| {
                let s = d.series();
                (0..s.len()).flat_map(move |t| (0..s.n_nodes()).map(move |n| s.get(t, n, 0)))
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    }
}

/// Splits chronologically, fits the normalizer on the training part, and windows each part.
pub fn prepare_splits(
    series: &FlowSeries,
    ratios: [f64; 3],
    horizon: usize,
    mode: NormMode,
) -> Result<DatasetSplits> {
    let [train, val, test] = chronological_split(series, ratios, horizon)?;
    let normalizer = Arc::new(Normalizer::fit(&train, mode)?);
    Ok(DatasetSplits {
        train: make_windows(&train, horizon, normalizer.clone(), Split::Train)?,
        val: make_windows(&val, horizon, normalizer.clone(), Split::Val)?,
        test: make_windows(&test, horizon, normalizer.clone(), Split::Test)?,
        normalizer,
    })
}
