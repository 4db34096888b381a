use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{denormalize_output, l1_loss};
use super::metrics::{evaluate, EvalReport};
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelConfig, ModelParams, Network, ParamVars};
use crate::real::Real;
use crate::rng::{SeedStreams, INIT, SHUFFLE};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

/// Optimiser progress and the best parameters seen on validation.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub epoch: usize,
    pub seed: u64,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub best_params: ModelParams<T>,
    pub history: Vec<EpochLog>,
}

impl<T: Real> TrainState<T> {
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// One optimiser step on a batch; returns the batch loss in flow units.
pub fn train_step<T: Real>(
    network: &Network,
    state: &mut TrainState<T>,
    data: &DatasetSplits,
    indices: &[usize],
    adam: &AdamConfig,
) -> Result<f64> {
    let batch = data.train.batch::<T>(indices)?;
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &state.params, true);
    let x = tape.constant(batch.x);
    let y = tape.constant(batch.y);
    let pred = network.forward(&mut tape, &vars, x)?;
    let pred = denormalize_output(&mut tape, pred, &data.normalizer)?;
    let loss = l1_loss(&mut tape, pred, y)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "loss became {value} at epoch {} step {}",
            state.epoch + 1,
            state.adam.step + 1
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<_> = vars.iter().map(|(_, v)| tape.grad(v)).collect();
    for ((name, _), g) in vars.iter().zip(&grads) {
        if g.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient for `{name}` at step {}",
                state.adam.step + 1
            )));
        }
    }
    adam_step(&mut state.params, &grads, &mut state.adam, adam)?;
    Ok(value)
}

/// Trains from freshly initialised parameters with early stopping on validation MAE.
pub fn train<T: Real>(
    config: &ModelConfig,
    graph: &Graph,
    data: &DatasetSplits,
    tc: &TrainConfig,
) -> Result<TrainState<T>> {
    let streams = SeedStreams::new(tc.seed);
    let params = ModelParams::<T>::init(config, &mut streams.rng(INIT))?;
    train_from(config, graph, data, tc, params, |_| {})
}

/// [`train`] from given parameters, calling `on_epoch` after each epoch.
pub fn train_from<T: Real>(
    config: &ModelConfig,
    graph: &Graph,
    data: &DatasetSplits,
    tc: &TrainConfig,
    params: ModelParams<T>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState<T>> {
    tc.validate()?;
    params.check_against(config)?;
    let network = Network::new(config, graph)?;
    let adam_cfg = AdamConfig {
        lr: tc.lr,
        ..Default::default()
    };
    let mut shuffle = SeedStreams::new(tc.seed).rng(SHUFFLE);
    let mut state = TrainState {
        adam: AdamState::new(&params),
        best_params: params.clone(),
        params,
        epoch: 0,
        seed: tc.seed,
        best_val_mae: f64::INFINITY,
        best_epoch: 0,
        history: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    while state.epoch < tc.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let loss = train_step(&network, &mut state, data, chunk, &adam_cfg)?;
            loss_sum += loss * chunk.len() as f64;
            weight += chunk.len();
            debug!("step {} loss {loss:.4}", state.adam.step);
        }
        state.epoch += 1;
        let val = evaluate(&network, &state.params, &data.val, tc.batch_size)?;
        let log = EpochLog {
            epoch: state.epoch,
            train_loss: loss_sum / weight.max(1) as f64,
            val_mae: val.overall.mae,
        };
        info!(
            "epoch {:>3}  train loss {:.4}  val MAE {:.4}",
            log.epoch, log.train_loss, log.val_mae
        );
        on_epoch(&log);
        state.history.push(log);
        if log.val_mae < state.best_val_mae {
            state.best_val_mae = log.val_mae;
            state.best_epoch = state.epoch;
            state.best_params = state.params.clone();
        } else if state.epoch - state.best_epoch >= tc.patience {
            info!(
                "no validation improvement for {} epochs, stopping",
                tc.patience
            );
            break;
        }
    }
    Ok(state)
}

/// Test-split report of the best parameters.
pub fn test_report<T: Real>(
    config: &ModelConfig,
    graph: &Graph,
    data: &DatasetSplits,
    params: &ModelParams<T>,
    batch_size: usize,
) -> Result<EvalReport> {
    let network = Network::new(config, graph)?;
    evaluate(&network, params, &data.test, batch_size)
}
