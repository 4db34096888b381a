use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Traffic readings `[L, N, C]`: `L` five-minute steps, `N` sensors, `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeries {
    len: usize,
    n_nodes: usize,
    channels: usize,
    values: Vec<f64>,
    pub node_ids: Option<Vec<String>>,
    pub start_timestamp: Option<String>,
}

impl FlowSeries {
    pub fn new(len: usize, n_nodes: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if len * n_nodes * channels != values.len() {
            return Err(Error::Contract(format!(
                "series of shape [{len}, {n_nodes}, {channels}] needs {} values, got {}",
                len * n_nodes * channels,
                values.len()
            )));
        }
        let bad: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .take(10)
            .map(|(i, _)| {
                let (t, rest) = (i / (n_nodes * channels), i % (n_nodes * channels));
                format!("({t},{},{})", rest / channels, rest % channels)
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::Contract(format!(
                "non-finite values at (step,node,channel) {}",
                bad.join(" ")
            )));
        }
        Ok(FlowSeries {
            len,
            n_nodes,
            channels,
            values,
            node_ids: None,
            start_timestamp: None,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.len, self.n_nodes, self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, node: usize, channel: usize) -> f64 {
        self.values[(t * self.n_nodes + node) * self.channels + channel]
    }

    /// Time series of one node and channel.
    pub fn node_series(&self, node: usize, channel: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, node, channel)).collect()
    }

    /// Contiguous steps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> FlowSeries {
        let row = self.n_nodes * self.channels;
        FlowSeries {
            len: end - start,
            n_nodes: self.n_nodes,
            channels: self.channels,
            values: self.values[start * row..end * row].to_vec(),
            node_ids: self.node_ids.clone(),
            start_timestamp: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobSidecar {
    shape: Vec<usize>,
    #[serde(default)]
    dtype: Option<String>,
}

fn blob_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Loads a flow series from CSV (rows are steps, columns are nodes, an
/// optional header row of node ids) or from a little-endian `f32` blob with
/// a `<path>.json` sidecar declaring `{"shape": [L, N, C]}`.
pub fn load_flow(path: &Path) -> Result<FlowSeries> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("txt") => load_flow_csv(path),
        _ => load_flow_blob(path),
    }
}

fn load_flow_csv(path: &Path) -> Result<FlowSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let ingest = |line: usize, msg: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut values = Vec::new();
    let mut width = None;
    let mut node_ids = None;
    let mut rows = 0;
    let mut nan_positions = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = idx + 1;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            node_ids = Some(record.iter().map(String::from).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(ingest(
                    line,
                    format!("ragged row: {} fields, expected {w}", record.len()),
                ))
            }
            _ => {}
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| ingest(line, format!("non-numeric cell `{field}` in column {col}")))?;
            if v.is_nan() {
                nan_positions.push(format!("({rows},{col})"));
            }
            values.push(v);
        }
        rows += 1;
    }
    if !nan_positions.is_empty() {
        return Err(ingest(
            0,
            format!("NaN at (step,node) {}", nan_positions.join(" ")),
        ));
    }
    let n = width.unwrap_or(0);
    let mut series = FlowSeries::new(rows, n, 1, values)?;
    series.node_ids = node_ids;
    Ok(series)
}

fn load_flow_blob(path: &Path) -> Result<FlowSeries> {
    let side = blob_sidecar(path);
    let meta: BlobSidecar =
        serde_json::from_slice(&std::fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if let Some(dt) = &meta.dtype {
        if dt != "f32" {
            return Err(Error::Config(format!(
                "{}: unsupported blob dtype `{dt}`",
                side.display()
            )));
        }
    }
    let shape: [usize; 3] = match meta.shape.as_slice() {
        [l, n] => [*l, *n, 1],
        [l, n, c] => [*l, *n, *c],
        other => {
            return Err(Error::Config(format!(
                "{}: shape must be [L, N] or [L, N, C], got {other:?}",
                side.display()
            )))
        }
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Config(format!(
            "{}: sidecar shape {:?} needs {expected} bytes, blob has {}",
            path.display(),
            shape,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FlowSeries::new(shape[0], shape[1], shape[2], values)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Ingest {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Writes channel 0 as CSV with a header of node ids (or indices).
pub fn write_flow_csv(series: &FlowSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = match &series.node_ids {
        Some(ids) => ids.clone(),
        None => (0..series.n_nodes).map(|i| format!("node{i}")).collect(),
    };
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..series.len {
        let row: Vec<String> = (0..series.n_nodes)
            .map(|n| format!("{}", series.get(t, n, 0)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the full `[L, N, C]` series as a little-endian `f32` blob plus sidecar.
pub fn write_flow_blob(series: &FlowSeries, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = series
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = blob_sidecar(path);
    let meta = BlobSidecar {
        shape: series.shape().to_vec(),
        dtype: Some("f32".into()),
    };
    std::fs::write(&side, serde_json::to_vec(&meta)?).map_err(|e| Error::io(&side, e))
}

/// Cuts `series` into contiguous train/validation/test parts.
///
/// The first two lengths are `floor(L * ratio)`; the remainder goes to test.
/// Each part must be able to host at least one window of `2 * horizon` steps.
pub fn chronological_split(
    series: &FlowSeries,
    ratios: [f64; 3],
    horizon: usize,
) -> Result<[FlowSeries; 3]> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let l = series.len();
    let n_train = (l as f64 * ratios[0]).floor() as usize;
    let n_val = (l as f64 * ratios[1]).floor() as usize;
    let cuts = [
        (0, n_train),
        (n_train, n_train + n_val),
        (n_train + n_val, l),
    ];
    for (name, (a, b)) in ["train", "validation", "test"].iter().zip(cuts) {
        if b - a < 2 * horizon {
            return Err(Error::Config(format!(
                "{name} split has {} steps, fewer than the {} needed for one window",
                b - a,
                2 * horizon
            )));
        }
    }
    Ok(cuts.map(|(a, b)| series.slice(a, b)))
}
