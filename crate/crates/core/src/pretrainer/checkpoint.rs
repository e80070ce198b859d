//! Binary checkpoint files.
//!
//! Layout: `VMAE1`, a `u32` format version, a `u64` index length, a JSON index
//! (run counters, model config, and for each tensor its name, dtype, shape and
//! byte offset), then raw little-endian tensor data.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::train::TrainState;
use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 5] = b"VMAE1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 5 + 4 + 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    step: u64,
    epoch: u64,
    seed: u64,
    faults: u64,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn groups<S: Real>(state: &TrainState<S>) -> [(&'static str, &ModelParams<S>); 3] {
    [("", &state.params), ("adam.m.", &state.adam.m), ("adam.v.", &state.adam.v)]
}

/// Serializes `state` to bytes. Identical states give identical bytes.
pub fn encode_checkpoint<S: Real>(state: &TrainState<S>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (prefix, params) in groups(state) {
        for (name, m) in params.tensors() {
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                dtype: S::DTYPE.to_string(),
                shape: [m.rows(), m.cols()],
                offset: data.len() as u64,
            });
            for &v in m.as_slice() {
                v.write_le(&mut data);
            }
        }
    }
    let index = Index {
        version: FORMAT_VERSION,
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        faults: state.faults,
        model: state.params.config().clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&index).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint<S: Real>(state: &TrainState<S>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_values<S: Real>(dtype: &str, raw: &[u8]) -> Result<Vec<S>> {
    match dtype {
        "f32" => Ok(raw.chunks_exact(4).map(|c| S::from_f64_lossy(f32::read_le(c) as f64)).collect()),
        "f64" => Ok(raw.chunks_exact(8).map(|c| S::from_f64_lossy(f64::read_le(c))).collect()),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Parses checkpoint bytes. With `expected` set, tensors are validated against that config instead of the stored one.
pub fn decode_checkpoint<S: Real>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState<S>> {
    if bytes.len() < PREAMBLE || &bytes[..5] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let index_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let data_start = PREAMBLE
        .checked_add(index_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated index".into()))?;
    let index: Index = serde_json::from_slice(&bytes[PREAMBLE..data_start])
        .map_err(|e| Error::Checkpoint(format!("malformed index: {e}")))?;
    let data = &bytes[data_start..];
    let config = expected.unwrap_or(&index.model);
    config.validate()?;

    let mut named: [Vec<(String, Mat<S>)>; 3] = Default::default();
    let mut end_of_data = 0usize;
    for t in index.tensors {
        let width = match t.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {other:?}", t.name))),
        };
        let start = t.offset as usize;
        let end = t.shape[0]
            .checked_mul(t.shape[1])
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_add(start))
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", t.name)))?;
        end_of_data = end_of_data.max(end);
        let m = Mat::from_vec(t.shape[0], t.shape[1], read_values(&t.dtype, &data[start..end])?)?;
        let (slot, name) = if let Some(n) = t.name.strip_prefix("adam.m.") {
            (1, n.to_string())
        } else if let Some(n) = t.name.strip_prefix("adam.v.") {
            (2, n.to_string())
        } else {
            (0, t.name)
        };
        named[slot].push((name, m));
    }
    if end_of_data != data.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", data.len() - end_of_data)));
    }
    let [p, m, v] = named;
    let params = ModelParams::from_named(config, p)?;
    let adam = AdamState {
        m: ModelParams::from_named(config, m).map_err(|e| Error::Checkpoint(format!("first moments: {e}")))?,
        v: ModelParams::from_named(config, v).map_err(|e| Error::Checkpoint(format!("second moments: {e}")))?,
    };
    Ok(TrainState { params, adam, step: index.step, epoch: index.epoch, seed: index.seed, faults: index.faults })
}

pub fn load_checkpoint<S: Real>(path: &Path) -> Result<TrainState<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, None)
}

/// Loads and validates every tensor against `expected`, naming the first that does not fit.
pub fn load_checkpoint_for<S: Real>(path: &Path, expected: &ModelConfig) -> Result<TrainState<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, Some(expected))
}
