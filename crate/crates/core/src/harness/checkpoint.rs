//! Checkpoints: `manifest.json` (model config, step, tensor index) next to
//! `tensors.bin`, a concatenation of tensor records.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, read_json, write_json, HarnessError};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::serialize::{read_tensor, write_tensor, TensorHeader, PAYLOAD_DTYPE};
use crate::nn::Real;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the record header in `tensors.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub step: usize,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Real>(dir: &Path, params: &ModelParams<T>, step: usize) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bin = dir.join(TENSORS_FILE);
    let mut w = BufWriter::new(File::create(&bin).map_err(io_err(&bin))?);
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        write_tensor(&mut w, name, t).map_err(io_err(&bin))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += TensorHeader {
            name: name.clone(),
            dtype: PAYLOAD_DTYPE.into(),
            shape: t.shape().to_vec(),
        }
        .record_len()
        .map_err(io_err(&bin))?;
    }
    w.flush().map_err(io_err(&bin))?;
    let manifest = Manifest {
        config: params.config.clone(),
        step,
        dtype: PAYLOAD_DTYPE.into(),
        tensors: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

/// Loads a checkpoint, checking the payload against the manifest index.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Manifest, ModelParams<T>), HarnessError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let bin = dir.join(TENSORS_FILE);
    let mut r = BufReader::new(File::open(&bin).map_err(io_err(&bin))?);
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let (name, t) = read_tensor::<T, _>(&mut r)
            .map_err(io_err(&bin))?
            .ok_or_else(|| HarnessError::Format {
                path: bin.clone(),
                reason: format!("missing tensor {}", entry.name),
            })?;
        if name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(HarnessError::Format {
                path: bin.clone(),
                reason: format!("record {name} does not match index entry {}", entry.name),
            });
        }
        named.push((name, t));
    }
    if read_tensor::<T, _>(&mut r).map_err(io_err(&bin))?.is_some() {
        return Err(HarnessError::Format {
            path: bin,
            reason: "trailing records".into(),
        });
    }
    let params = ModelParams::from_named(&manifest.config, named)?;
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tying: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            hidden_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            seq_len: 4,
            weight_tying: tying,
            seed: 1,
        }
    }

    #[test]
    fn round_trip() {
        for tying in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let p = ModelParams::<f32>::init(&cfg(tying)).unwrap();
            save_checkpoint(dir.path(), &p, 7).unwrap();
            let (m, back) = load_checkpoint::<f32>(dir.path()).unwrap();
            assert_eq!(m.step, 7);
            assert_eq!(back, p);
            let bin = fs::read(dir.path().join(TENSORS_FILE)).unwrap();
            let last = m.tensors.last().unwrap();
            assert_eq!(bin[last.offset], b'{');
        }
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::<f32>::init(&cfg(false)).unwrap();
        save_checkpoint(dir.path(), &p, 0).unwrap();
        let path = dir.path().join(TENSORS_FILE);
        let mut bin = fs::read(&path).unwrap();
        bin.truncate(bin.len() / 2);
        fs::write(&path, bin).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
