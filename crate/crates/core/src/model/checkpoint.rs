//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MSTF" | version: u32 | count: u32
//! count × { name_len: u32 | name: utf8 | dtype: u8 | ndim: u32 | dims: u64 × ndim }
//! count × raw little-endian payloads, in manifest order
//! ```
//!
//! The model configuration is written next to the checkpoint as
//! `<checkpoint>.json`.

use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSTF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    std::fs::write(&side, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads every parameter, converting the stored precision to `T`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not an MSTF checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, dtype, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dtype, shape) in manifest {
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payloads".into()));
    }
    ModelParams::from_entries(entries)
}

/// Loads a checkpoint and rejects it unless every name and shape matches `config`.
pub fn load_checkpoint_for<T: Real>(path: &Path, config: &ModelConfig) -> Result<ModelParams<T>> {
    let params = load_checkpoint(path)?;
    params.check_against(config)?;
    Ok(params)
}

/// The model configuration stored beside a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let side = sidecar(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_slice(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            embed_dim: 2,
            horizon: 3,
            ..ModelConfig::new(3)
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mstf");
        let cfg = small();
        let p = ModelParams::<f32>::init(&cfg, &mut SeedStreams::new(4).rng("init")).unwrap();
        save_checkpoint(&path, &p, &cfg).unwrap();
        let back: ModelParams<f32> = load_checkpoint_for(&path, &cfg).unwrap();
        assert_eq!(back, p);
        assert_eq!(read_checkpoint_config(&path).unwrap(), cfg);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MSTF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mstf");
        let cfg = small();
        let p = ModelParams::<f64>::init(&cfg, &mut SeedStreams::new(4).rng("init")).unwrap();
        save_checkpoint(&path, &p, &cfg).unwrap();

        let other = ModelConfig {
            hidden_dim: 5,
            ..cfg.clone()
        };
        assert!(matches!(
            load_checkpoint_for::<f64>(&path, &other),
            Err(Error::Checkpoint(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
