mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mstfgrn::data::NormMode;
use mstfgrn::graph::AdjacencyCombine;
use mstfgrn::model::{AdjacencyMode, HeadMode, ModelConfig};
use mstfgrn::train::{TrainConfig, Variant};
use mstfgrn::{DType, Error, Result};
use serde::de::DeserializeOwned;

use commands::EvalArgs;
use config::{DataSource, ModelKind, RunConfig};

/// Traffic flow forecasting with a graph-recurrent network.
#[derive(Parser)]
#[command(name = "mstfgrn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, logs and test report to --out.
    Train {
        /// Rerun a stored config.json; other flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Evaluate a trained run on its test split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to load instead of `<run>/model.mstf`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Forecast the next steps from one input window.
    Predict {
        #[arg(long)]
        run: PathBuf,
        /// Flow file holding exactly one input window (steps x nodes).
        #[arg(long)]
        window: PathBuf,
        /// CSV written with one row per forecast step.
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Train the full model and each ablation variant on the same data.
    Ablate {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Write a synthetic graph and flow series to --out.
    Gen {
        /// Write the flow as an f32 blob with a JSON sidecar instead of CSV.
        #[arg(long)]
        blob: bool,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Args, Default)]
struct RunOpts {
    /// Edge list CSV (`from,to,cost`).
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Flow series: CSV, or a raw f32 blob with a `.json` shape sidecar.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Sensor id list mapping edge-list ids to node indices.
    #[arg(long)]
    node_ids: Option<PathBuf>,
    /// Synthetic data `topology:nodes:steps`, e.g. `ring:8:2000`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Input window and forecast length [default: 12].
    #[arg(long)]
    horizon: Option<usize>,
    /// Node embedding width [default: 10].
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Recurrent hidden width [default: 64].
    #[arg(long)]
    hidden: Option<usize>,
    /// Graph propagation depth [default: 1].
    #[arg(long)]
    gcn_layers: Option<usize>,
    /// Minibatch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Maximum epochs [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 15].
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for initialisation, shuffling and synthetic data [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Independent training runs reported as mean and std [default: 1].
    #[arg(long)]
    repeats: Option<usize>,
    /// full, no_node_embedding, no_adjacency_matrix, no_reverse, no_attention.
    #[arg(long)]
    variant: Option<Variant>,
    /// semi_autonomous, predefined_only, adaptive_only or identity.
    #[arg(long, value_parser = parse_serde::<AdjacencyMode>)]
    adjacency_mode: Option<AdjacencyMode>,
    /// mask or matmul.
    #[arg(long, value_parser = parse_serde::<AdjacencyCombine>)]
    adjacency_combine: Option<AdjacencyCombine>,
    /// flatten or per_step.
    #[arg(long, value_parser = parse_serde::<HeadMode>)]
    head: Option<HeadMode>,
    /// mstfgrn or gru.
    #[arg(long, value_parser = parse_serde::<ModelKind>)]
    model: Option<ModelKind>,
    /// f32 or f64 [default: f32].
    #[arg(long, value_parser = parse_serde::<DType>)]
    dtype: Option<DType>,
    /// global or per_node z-score statistics [default: global].
    #[arg(long, value_parser = parse_serde::<NormMode>)]
    norm: Option<NormMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl RunOpts {
    fn data(&self) -> DataSource {
        DataSource {
            edges: self.edges.clone(),
            flows: self.flows.clone(),
            node_ids: self.node_ids.clone(),
            synthetic: self.synthetic.clone(),
        }
    }

    /// Overlays every flag that was given on `rc`.
    fn apply(self, rc: &mut RunConfig) {
        let data = self.data();
        if !data.is_empty() {
            rc.data = data;
        }
        let m = &mut rc.model;
        set(&mut m.horizon, self.horizon);
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.hidden_dim, self.hidden);
        set(&mut m.gcn_layers, self.gcn_layers);
        set(&mut m.adjacency_mode, self.adjacency_mode);
        set(&mut m.adjacency_combine, self.adjacency_combine);
        set(&mut m.head, self.head);
        let t = &mut rc.train;
        set(&mut t.batch_size, self.batch);
        set(&mut t.lr, self.lr);
        set(&mut t.epochs, self.epochs);
        set(&mut t.patience, self.patience);
        set(&mut t.seed, self.seed);
        set(&mut rc.repeats, self.repeats);
        set(&mut rc.variant, self.variant);
        set(&mut rc.model_kind, self.model);
        set(&mut rc.dtype, self.dtype);
        set(&mut rc.norm, self.norm);
        set(&mut rc.out, self.out);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn default_config(command: &str) -> RunConfig {
    RunConfig {
        command: command.to_string(),
        data: DataSource::default(),
        model_kind: ModelKind::default(),
        variant: Variant::Full,
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        repeats: 1,
        split: [0.6, 0.2, 0.2],
        norm: NormMode::default(),
        dtype: DType::F32,
        out: PathBuf::from("runs/latest"),
    }
}

fn stored_config(run: &std::path::Path) -> Result<RunConfig> {
    RunConfig::read(&run.join("config.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, opts } => {
            let mut rc = match config {
                Some(path) => RunConfig::read(&path)?,
                None => default_config("train"),
            };
            rc.command = "train".into();
            opts.apply(&mut rc);
            commands::cmd_train(rc)
        }
        Command::Eval {
            run,
            checkpoint,
            opts,
        } => {
            let mut rc = stored_config(&run)?;
            let out = opts.out.clone();
            opts.apply(&mut rc);
            commands::cmd_eval(
                rc,
                EvalArgs {
                    run,
                    checkpoint,
                    out,
                },
            )
        }
        Command::Predict {
            run,
            window,
            output,
            opts,
        } => {
            let mut rc = stored_config(&run)?;
            opts.apply(&mut rc);
            commands::cmd_predict(rc, &run, &window, &output)
        }
        Command::Ablate { opts } => {
            let mut rc = default_config("ablate");
            rc.out = PathBuf::from("runs/ablation");
            opts.apply(&mut rc);
            commands::cmd_ablate(rc)
        }
        Command::Gen { blob, opts } => {
            let mut rc = default_config("gen");
            rc.out = PathBuf::from("data/synthetic");
            opts.apply(&mut rc);
            if rc.data.synthetic.is_none() {
                return Err(Error::Config(
                    "gen needs --synthetic topology:nodes:steps".into(),
                ));
            }
            commands::cmd_gen(&rc, blob)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Ingest { .. } | Error::Io { .. } | Error::Config(_) | Error::Json(_) => 2,
        Error::Dimension { .. } | Error::Contract(_) | Error::State(_) | Error::Checkpoint(_) => 3,
        Error::Divergence(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
