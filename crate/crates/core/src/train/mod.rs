//! Training loop, optimiser, metrics and reference baselines.

mod ablation;
mod adam;
mod loss;
mod metrics;
mod trainer;

pub use ablation::{ablation_factory, gru_baseline, summarize_repeats, RepeatSummary, Variant};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{denormalize_output, denormalize_tensor, l1_loss};
pub use metrics::{baseline_ha, evaluate, EvalReport, MetricAccumulator, Metrics};
pub use trainer::{test_report, train, train_from, train_step, EpochLog, TrainConfig, TrainState};
