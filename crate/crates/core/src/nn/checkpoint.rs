//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `ARTICKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then the raw
//! little-endian parameter vector followed by the optional Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Denoiser, DenoiserConfig, TensorInfo};
use super::real::Real;
use super::NnError;
use crate::diffusion::ScheduleSpec;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ARTICKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<R: Real> {
    pub model: Denoiser<R>,
    pub schedule: ScheduleSpec,
    pub optimizer: Option<OptimizerState<R>>,
    /// Free-form training state (epoch counters, configs).
    pub train_state: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: DenoiserConfig,
    schedule: ScheduleSpec,
    param_count: usize,
    tensors: Vec<TensorInfo>,
    has_optimizer: bool,
    #[serde(default)]
    train_state: serde_json::Value,
}

fn ck_err(path: &Path, message: impl Into<String>) -> NnError {
    NnError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint<R: Real>(path: &Path, ck: &Checkpoint<R>) -> Result<(), NnError> {
    let n = ck.model.num_params();
    if let Some(opt) = &ck.optimizer {
        if opt.m.len() != n || opt.v.len() != n {
            return Err(ck_err(path, "optimizer moments do not match parameter count"));
        }
    }
    let header = Header {
        dtype: R::DTYPE.to_string(),
        config: ck.model.config().clone(),
        schedule: ck.schedule,
        param_count: n,
        tensors: ck.model.tensors().to_vec(),
        has_optimizer: ck.optimizer.is_some(),
        train_state: ck.train_state.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(path, e.to_string()))?;
    let mult = if ck.optimizer.is_some() { 3 } else { 1 };
    let mut buf = Vec::with_capacity(20 + json.len() + mult * n * R::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &p in ck.model.params() {
        p.write_le(&mut buf);
    }
    if let Some(opt) = &ck.optimizer {
        for &p in opt.m.iter().chain(&opt.v) {
            p.write_le(&mut buf);
        }
    }

    let io_err = |source| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

fn read_values<R: Real, S: Real>(bytes: &[u8], count: usize) -> Vec<R> {
    bytes
        .chunks_exact(S::BYTES)
        .take(count)
        .map(|c| R::of(S::read_le(c).as_f64()))
        .collect()
}

/// Loads a checkpoint, converting stored values to `R` if needed.
pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>, NnError> {
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| ck_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| ck_err(path, e.to_string()))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(ck_err(path, format!("unknown dtype {other}"))),
    };
    let n = header.param_count;
    let blocks = if header.has_optimizer { 3 } else { 1 };
    let data = &bytes[20 + hlen..];
    if data.len() != blocks * n * width {
        return Err(ck_err(
            path,
            format!("expected {} data bytes, found {}", blocks * n * width, data.len()),
        ));
    }
    let read = |i: usize| -> Vec<R> {
        let chunk = &data[i * n * width..(i + 1) * n * width];
        if width == 4 {
            read_values::<R, f32>(chunk, n)
        } else {
            read_values::<R, f64>(chunk, n)
        }
    };
    let model = Denoiser::from_params(header.config, read(0))?;
    if model.tensors() != header.tensors.as_slice() {
        return Err(ck_err(path, "tensor table does not match the stored config"));
    }
    let optimizer = header.has_optimizer.then(|| OptimizerState { m: read(1), v: read(2) });
    Ok(Checkpoint {
        model,
        schedule: header.schedule,
        optimizer,
        train_state: header.train_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Denoiser::<f32>::new(DenoiserConfig::tiny(), 3).unwrap();
        let n = model.num_params();
        let ck = Checkpoint {
            model,
            schedule: ScheduleSpec::default(),
            optimizer: Some(OptimizerState {
                m: vec![0.5; n],
                v: vec![0.25; n],
            }),
            train_state: serde_json::json!({"epoch": 7}),
        };
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.train_state["epoch"], 7);
        assert!(!path.with_extension("tmp").exists());

        let widened: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(widened.model.params()[5], ck.model.params()[5] as f64);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
