use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::denormalize_tensor;
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Network};
use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; samples with a zero true value are left out.
    pub mape: f64,
}

/// Error metrics over a split, overall and per forecast step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    /// Number of scalar forecasts scored.
    pub samples: usize,
    /// Forecasts excluded from MAPE because the true value was zero.
    pub mape_excluded: usize,
}

/// Running sums for one forecast step, kept in `f64`.
#[derive(Clone, Copy, Debug, Default)]
struct StepSums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    zeros: usize,
}

/// Streaming accumulator behind [`EvalReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    steps: Vec<StepSums>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        MetricAccumulator {
            steps: vec![StepSums::default(); horizon],
        }
    }

    pub fn push(&mut self, step: usize, truth: f64, pred: f64) {
        let s = &mut self.steps[step];
        let e = truth - pred;
        s.abs += e.abs();
        s.sq += e * e;
        s.count += 1;
        if truth == 0.0 {
            s.zeros += 1;
        } else {
            s.ape += (e / truth).abs();
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            a.abs += b.abs;
            a.sq += b.sq;
            a.ape += b.ape;
            a.count += b.count;
            a.zeros += b.zeros;
        }
    }

    pub fn finish(&self) -> Result<EvalReport> {
        let total = self.steps.iter().fold(StepSums::default(), |mut a, b| {
            a.abs += b.abs;
            a.sq += b.sq;
            a.ape += b.ape;
            a.count += b.count;
            a.zeros += b.zeros;
            a
        });
        if total.count == 0 {
            return Err(Error::Contract("cannot evaluate an empty split".into()));
        }
        let metrics = |s: &StepSums| {
            let n = s.count.max(1) as f64;
            let scored = s.count - s.zeros;
            Metrics {
                mae: s.abs / n,
                rmse: (s.sq / n).sqrt(),
                mape: if scored == 0 {
                    0.0
                } else {
                    100.0 * s.ape / scored as f64
                },
            }
        };
        Ok(EvalReport {
            overall: metrics(&total),
            per_horizon: self.steps.iter().map(metrics).collect(),
            samples: total.count,
            mape_excluded: total.zeros,
        })
    }
}

impl EvalReport {
    /// Scores `(horizon step, truth, forecast)` triples.
    pub fn from_triples(
        horizon: usize,
        triples: impl IntoIterator<Item = (usize, f64, f64)>,
    ) -> Result<Self> {
        let mut acc = MetricAccumulator::new(horizon);
        for (s, y, p) in triples {
            acc.push(s, y, p);
        }
        acc.finish()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// `horizon,mae,rmse,mape` with one row per forecast step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape\n");
        for (i, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i + 1, m.mae, m.rmse, m.mape));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Human-readable table of overall and per-step metrics.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>10} {:>10} {:>9}\n",
            "horizon", "MAE", "RMSE", "MAPE%"
        );
        for (i, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!(
                "{:>8} {:>10.4} {:>10.4} {:>9.3}\n",
                i + 1,
                m.mae,
                m.rmse,
                m.mape
            ));
        }
        let m = &self.overall;
        out.push_str(&format!(
            "{:>8} {:>10.4} {:>10.4} {:>9.3}\n",
            "all", m.mae, m.rmse, m.mape
        ));
        out
    }
}

fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("MSTF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Scores the network on every window of `data` in flow units.
///
/// Batches are scored concurrently (up to `MSTF_THREADS` workers) and their
/// sums merged in batch order, so the report does not depend on scheduling.
pub fn evaluate<T: Real>(
    network: &Network,
    params: &ModelParams<T>,
    data: &WindowedDataset,
    batch_size: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let batches = data.sequential_batches(batch_size);
    let horizon = data.horizon();
    let parts: Vec<MetricAccumulator> = eval_pool().install(|| {
        batches
            .par_iter()
            .map(|idx| -> Result<MetricAccumulator> {
                let batch = data.batch::<T>(idx)?;
                let pred = network.predict(params, &batch.x)?;
                let pred = denormalize_tensor(&pred, data.normalizer())?;
                let mut acc = MetricAccumulator::new(horizon);
                for (k, (y, p)) in batch.y.data().iter().zip(pred.data()).enumerate() {
                    acc.push(k % horizon, y.as_f64(), p.as_f64());
                }
                Ok(acc)
            })
            .collect::<Result<_>>()
    })?;
    let mut total = MetricAccumulator::new(horizon);
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

/// Historical average: every step of the forecast is the mean of the raw input window.
pub fn baseline_ha(data: &WindowedDataset) -> Result<EvalReport> {
    let t = data.horizon();
    let mut acc = MetricAccumulator::new(t);
    for i in 0..data.len() {
        for node in 0..data.n_nodes() {
            let mean = (0..t).map(|s| data.raw_input(i, s, node)).sum::<f64>() / t as f64;
            for s in 0..t {
                acc.push(s, data.target(i, s, node), mean);
            }
        }
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::{make_windows, FlowSeries, NormMode, Normalizer, Split};

    #[test]
    fn hand_computed_example() {
        let r = EvalReport::from_triples(1, [(0, 1.0, 0.0), (0, 4.0, 2.0)]).unwrap();
        assert!((r.overall.mae - 1.5).abs() < 1e-12);
        assert!((r.overall.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((r.overall.mape - 75.0).abs() < 1e-12);
        let z = EvalReport::from_triples(2, [(0, 3.0, 3.0), (1, 5.0, 5.0)]).unwrap();
        assert_eq!(z.overall, Metrics::default());
    }

    #[test]
    fn mape_excludes_and_counts_zero_truths() {
        let base = [(0, 2.0, 1.0), (1, 4.0, 5.0)];
        let a = EvalReport::from_triples(2, base).unwrap();
        let b = EvalReport::from_triples(2, base.into_iter().chain([(0, 0.0, 3.0)])).unwrap();
        assert_eq!(a.mape_excluded, 0);
        assert_eq!(b.mape_excluded, 1);
        assert_eq!(a.overall.mape, b.overall.mape);
        assert!(b.overall.mae > a.overall.mae);
    }

    #[test]
    fn per_horizon_averages_to_overall() {
        let triples: Vec<_> = (0..60)
            .map(|k| (k % 3, 10.0 + k as f64, (k * k % 17) as f64))
            .collect();
        let r = EvalReport::from_triples(3, triples).unwrap();
        let mean_mae = r.per_horizon.iter().map(|m| m.mae).sum::<f64>() / 3.0;
        let mean_sq = r.per_horizon.iter().map(|m| m.rmse * m.rmse).sum::<f64>() / 3.0;
        assert!((mean_mae - r.overall.mae).abs() < 1e-6);
        assert!((mean_sq.sqrt() - r.overall.rmse).abs() < 1e-6);
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(EvalReport::from_triples(2, []).is_err());
    }

    fn dataset(values: Vec<f64>, n: usize) -> crate::data::WindowedDataset {
        let s = FlowSeries::new(values.len() / n, n, 1, values).unwrap();
        let norm = Arc::new(Normalizer::fit(&s, NormMode::Global).unwrap());
        make_windows(&s, 12, norm, Split::Test).unwrap()
    }

    #[test]
    fn ha_examples() {
        let d = dataset(vec![7.0; 60], 2);
        assert_eq!(baseline_ha(&d).unwrap().overall.mae, 0.0);
        // Input window 1..=12 then a constant 6.5 target: HA is exact.
        let mut v: Vec<f64> = (1..=12).map(f64::from).collect();
        v.extend([6.5; 12]);
        let r = baseline_ha(&dataset(v, 1)).unwrap();
        assert_eq!(r.overall.mae, 0.0);
    }
}
