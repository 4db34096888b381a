use mstfgrn::data::{
    gen_synthetic, prepare_splits, DatasetSplits, NormMode, SynthConfig, Topology,
};
use mstfgrn::graph::Graph;
use mstfgrn::model::{ModelConfig, ModelParams};
use mstfgrn::rng::{SeedStreams, INIT};
use mstfgrn::train::{train, train_from, TrainConfig};

fn ring_setup(len: usize) -> (Graph, DatasetSplits, ModelConfig) {
    let (graph, series) = gen_synthetic(&SynthConfig::new(Topology::Ring, 8, len), 7).unwrap();
    let data = prepare_splits(&series, [0.6, 0.2, 0.2], 12, NormMode::Global).unwrap();
    let config = ModelConfig {
        hidden_dim: 16,
        ..ModelConfig::new(8)
    };
    (graph, data, config)
}

#[test]
fn train_loss_falls_over_first_epochs() {
    let (graph, data, config) = ring_setup(800);
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let state = train::<f32>(&config, &graph, &data, &tc).unwrap();
    let losses: Vec<f64> = state.history.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 5);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "train loss did not fall: {losses:?}");
    }
}

#[test]
fn zero_epochs_return_initial_params() {
    let (graph, data, config) = ring_setup(400);
    let init = ModelParams::<f64>::init(&config, &mut SeedStreams::new(3).rng(INIT)).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        seed: 3,
        ..TrainConfig::default()
    };
    let state = train_from(&config, &graph, &data, &tc, init.clone(), |_| {}).unwrap();
    assert_eq!(state.params, init);
    assert_eq!(state.best_params, init);
    assert!(state.history.is_empty());
}

#[test]
fn same_seed_same_validation_curve() {
    let (graph, data, config) = ring_setup(400);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train::<f64>(&config, &graph, &data, &tc).unwrap();
    let b = train::<f64>(&config, &graph, &data, &tc).unwrap();
    let va: Vec<f64> = a.history.iter().map(|e| e.val_mae).collect();
    let vb: Vec<f64> = b.history.iter().map(|e| e.val_mae).collect();
    assert_eq!(va, vb);
    assert_eq!(a.best_params, b.best_params);
}
