use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mstfgrn::data::{
    load_flow, prepare_splits, write_flow_blob, write_flow_csv, DatasetSplits, Normalizer,
};
use mstfgrn::graph::Graph;
use mstfgrn::model::{load_checkpoint_for, save_checkpoint, ModelConfig, ModelParams, Network};
use mstfgrn::rng::{SeedStreams, INIT};
use mstfgrn::train::{
    baseline_ha, denormalize_tensor, evaluate, summarize_repeats, train_from, EvalReport,
    TrainConfig, Variant,
};
use mstfgrn::{Error, Real, Result, Tensor};

use crate::config::{io_err, RunConfig};

pub const CHECKPOINT: &str = "model.mstf";
pub const NORMALIZER: &str = "normalizer.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

struct Prepared {
    graph: Graph,
    data: DatasetSplits,
}

fn prepare(rc: &mut RunConfig) -> Result<Prepared> {
    let (graph, series) = rc.data.load(rc.train.seed)?;
    rc.resolve_model(series.n_nodes())?;
    if series.channels() != rc.model.input_dim {
        return Err(Error::Config(format!(
            "flow series has {} channels, model expects {}",
            series.channels(),
            rc.model.input_dim
        )));
    }
    let data = prepare_splits(&series, rc.split, rc.model.horizon, rc.norm)?;
    info!(
        "{} nodes, {} steps; windows train/val/test {}/{}/{}",
        series.n_nodes(),
        series.len(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    Ok(Prepared { graph, data })
}

/// Trains one model into `dir` and returns its test report.
fn train_one<T: Real>(
    model: &ModelConfig,
    tc: &TrainConfig,
    prep: &Prepared,
    dir: &Path,
) -> Result<(EvalReport, f64)> {
    create_dir(dir)?;
    let params = ModelParams::<T>::init(model, &mut SeedStreams::new(tc.seed).rng(INIT))?;
    let log_path = dir.join("train_log.csv");
    let mut log = String::from("epoch,train_loss,val_mae\n");
    write_text(&log_path, &log)?;
    let mut log_err = None;
    let state = train_from(model, &prep.graph, &prep.data, tc, params, |e| {
        let _ = writeln!(log, "{},{},{}", e.epoch, e.train_loss, e.val_mae);
        if let Err(err) = write_text(&log_path, &log) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = log_err {
        return Err(err);
    }
    save_checkpoint(&dir.join(CHECKPOINT), &state.best_params, model)?;
    let network = Network::new(model, &prep.graph)?;
    let report = evaluate(&network, &state.best_params, &prep.data.test, tc.batch_size)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    info!(
        "best epoch {} (val MAE {:.4}); test MAE {:.4}",
        state.best_epoch, state.best_val_mae, report.overall.mae
    );
    Ok((report, state.best_val_mae))
}

fn dispatch_train(
    rc: &RunConfig,
    model: &ModelConfig,
    tc: &TrainConfig,
    prep: &Prepared,
    dir: &Path,
) -> Result<(EvalReport, f64)> {
    match rc.dtype {
        mstfgrn::DType::F32 => train_one::<f32>(model, tc, prep, dir),
        mstfgrn::DType::F64 => train_one::<f64>(model, tc, prep, dir),
    }
}

pub fn cmd_train(mut rc: RunConfig) -> Result<()> {
    create_dir(&rc.out)?;
    let prep = prepare(&mut rc)?;
    rc.write(&rc.out)?;
    write_json(&rc.out.join(NORMALIZER), prep.data.normalizer.as_ref())?;
    let ha = baseline_ha(&prep.data.test)?;
    ha.write_json(&rc.out.join("baseline_ha.json"))?;

    let mut reports = Vec::new();
    for k in 0..rc.repeats.max(1) {
        let tc = TrainConfig {
            seed: rc.repeat_seed(k),
            ..rc.train.clone()
        };
        let dir = if rc.repeats <= 1 {
            rc.out.clone()
        } else {
            rc.out.join(format!("run_{k}"))
        };
        reports.push(dispatch_train(&rc, &rc.model, &tc, &prep, &dir)?.0);
    }
    println!("HA baseline test MAE {:.4}", ha.overall.mae);
    if reports.len() == 1 {
        print!("{}", reports[0].table());
    } else {
        let s = summarize_repeats(&reports)?;
        write_json(&rc.out.join("summary.json"), &s)?;
        println!("{} runs (mean ± std)", s.runs);
        println!("MAE  {:.4} ± {:.4}", s.mean.mae, s.std.mae);
        println!("RMSE {:.4} ± {:.4}", s.mean.rmse, s.std.rmse);
        println!("MAPE {:.3}% ± {:.3}", s.mean.mape, s.std.mape);
    }
    Ok(())
}

pub struct EvalArgs {
    pub run: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(mut rc: RunConfig, args: EvalArgs) -> Result<()> {
    let prep = prepare(&mut rc)?;
    let ckpt = args.checkpoint.unwrap_or_else(|| args.run.join(CHECKPOINT));
    let network = Network::new(&rc.model, &prep.graph)?;
    let report = match rc.dtype {
        mstfgrn::DType::F32 => {
            let p = load_checkpoint_for::<f32>(&ckpt, &rc.model)?;
            evaluate(&network, &p, &prep.data.test, rc.train.batch_size)?
        }
        mstfgrn::DType::F64 => {
            let p = load_checkpoint_for::<f64>(&ckpt, &rc.model)?;
            evaluate(&network, &p, &prep.data.test, rc.train.batch_size)?
        }
    };
    let out = args.out.unwrap_or(args.run);
    create_dir(&out)?;
    report.write_json(&out.join("eval_report.json"))?;
    report.write_csv(&out.join("eval_report.csv"))?;
    print!("{}", report.table());
    Ok(())
}

fn predict_with<T: Real>(
    rc: &RunConfig,
    graph: &Graph,
    ckpt: &Path,
    norm: &Normalizer,
    window: &Tensor<T>,
) -> Result<Tensor<T>> {
    let params = load_checkpoint_for::<T>(ckpt, &rc.model)?;
    let network = Network::new(&rc.model, graph)?;
    let pred = network.predict(&params, window)?;
    denormalize_tensor(&pred, norm)
}

pub fn cmd_predict(mut rc: RunConfig, run: &Path, window: &Path, output: &Path) -> Result<()> {
    let (graph, series) = rc.data.load(rc.train.seed)?;
    rc.resolve_model(series.n_nodes())?;
    let norm_path = run.join(NORMALIZER);
    let norm: Normalizer =
        serde_json::from_slice(&fs::read(&norm_path).map_err(|e| io_err(&norm_path, e))?)?;
    let w = load_flow(window)?;
    let m = &rc.model;
    if w.len() != m.horizon || w.n_nodes() != m.n_nodes || w.channels() != m.input_dim {
        return Err(Error::Config(format!(
            "{}: window is {:?} (steps, nodes, channels), model needs [{}, {}, {}]",
            window.display(),
            w.shape(),
            m.horizon,
            m.n_nodes,
            m.input_dim
        )));
    }
    let mut x = Vec::with_capacity(w.values().len());
    for t in 0..w.len() {
        for n in 0..w.n_nodes() {
            for c in 0..w.channels() {
                x.push(norm.normalize(w.get(t, n, c), n, c));
            }
        }
    }
    let shape = [1, m.horizon, m.n_nodes, m.input_dim];
    let ckpt = run.join(CHECKPOINT);
    // Forecast is [1, N, T, 1]; emitted as T rows of N columns.
    let forecast: Vec<f64> = match rc.dtype {
        mstfgrn::DType::F32 => {
            let t = Tensor::<f32>::from_f64(shape, &x)?;
            predict_with(&rc, &graph, &ckpt, &norm, &t)?
                .cast::<f64>()
                .into_data()
        }
        mstfgrn::DType::F64 => {
            let t = Tensor::<f64>::from_f64(shape, &x)?;
            predict_with(&rc, &graph, &ckpt, &norm, &t)?.into_data()
        }
    };
    let ids: Vec<String> = match series.node_ids.clone() {
        Some(ids) => ids,
        None => (0..m.n_nodes).map(|i| format!("node{i}")).collect(),
    };
    let mut out = ids.join(",");
    out.push('\n');
    for t in 0..m.horizon {
        let row: Vec<String> = (0..m.n_nodes)
            .map(|n| format!("{}", forecast[n * m.horizon + t]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(output, &out)?;
    info!("wrote {} forecast rows to {}", m.horizon, output.display());
    Ok(())
}

pub fn cmd_ablate(mut rc: RunConfig) -> Result<()> {
    rc.variant = Variant::Full;
    create_dir(&rc.out)?;
    let prep = prepare(&mut rc)?;
    rc.write(&rc.out)?;
    write_json(&rc.out.join(NORMALIZER), prep.data.normalizer.as_ref())?;
    let mut csv = String::from("variant,mae,rmse,mape,val_mae\n");
    let mut table = format!(
        "{:<22} {:>10} {:>10} {:>9}\n",
        "variant", "MAE", "RMSE", "MAPE%"
    );
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut cfg = rc.clone();
        cfg.variant = v;
        cfg.resolve_model(prep.data.train.n_nodes())?;
        let dir = rc.out.join(v.name());
        let (report, val) = dispatch_train(&rc, &cfg.model, &rc.train, &prep, &dir)?;
        let m = report.overall;
        let _ = writeln!(csv, "{v},{},{},{},{val}", m.mae, m.rmse, m.mape);
        let _ = writeln!(
            table,
            "{:<22} {:>10.4} {:>10.4} {:>9.3}",
            v.name(),
            m.mae,
            m.rmse,
            m.mape
        );
        rows.push(serde_json::json!({"variant": v, "test": report, "best_val_mae": val}));
    }
    write_text(&rc.out.join("ablation.csv"), &csv)?;
    write_json(&rc.out.join("ablation.json"), &rows)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_gen(rc: &RunConfig, blob: bool) -> Result<()> {
    create_dir(&rc.out)?;
    let (graph, series) = rc.data.load(rc.train.seed)?;
    graph.write_edge_list(&rc.out.join("edges.csv"))?;
    if blob {
        write_flow_blob(&series, &rc.out.join("flow.bin"))?;
    } else {
        write_flow_csv(&series, &rc.out.join("flow.csv"))?;
    }
    println!(
        "wrote {} nodes, {} edges, {} steps to {}",
        graph.n_nodes(),
        graph.edge_count(),
        series.len(),
        rc.out.display()
    );
    Ok(())
}
