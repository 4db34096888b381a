//! Flow series ingestion, normalisation, windowing and synthetic corpora.

mod normalize;
mod series;
mod synth;
mod windows;

pub use normalize::{NormMode, Normalizer};
pub use series::{chronological_split, load_flow, write_flow_blob, write_flow_csv, FlowSeries};
pub use synth::{gen_synthetic, SynthConfig, Topology, DIURNAL_PERIOD};
pub use windows::{make_windows, prepare_splits, Batch, DatasetSplits, Split, WindowedDataset};
