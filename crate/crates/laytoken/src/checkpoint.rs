//! Checkpoint format: magic bytes, a JSON manifest (version, configs, named
//! tensor shapes, step), then all tensor data as little-endian f32 in
//! manifest order. Parameters therefore round-trip within 32-bit precision.

use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LAYTOKC1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: usize,
    pub tensors: Vec<TensorInfo>,
}

pub fn save_checkpoint(
    model: &Model,
    train_config: &TrainConfig,
    step: usize,
    path: &Path,
) -> Result<()> {
    let tensors: Vec<TensorInfo> = model
        .params()
        .into_iter()
        .map(|(name, p)| TensorInfo {
            name,
            shape: p.value.shape.clone(),
        })
        .collect();
    let manifest = Manifest {
        version: VERSION,
        model_config: model.config.clone(),
        train_config: train_config.clone(),
        step,
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");

    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&manifest_json).map_err(io_err)?;
    let mut buf = Vec::with_capacity(model.param_count() * 4);
    for (_, p) in model.params() {
        for &v in &p.value.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model from the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Manifest)> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointFormat("file too short for magic bytes".into()))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic bytes {magic:?}; not a checkpoint file"
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::CheckpointFormat("file too short for manifest length".into()))?;
    let manifest_len = u32::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)
        .map_err(|_| Error::CheckpointFormat("file too short for manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::CheckpointFormat(format!("manifest does not parse: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: VERSION,
        });
    }

    let mut model = Model::new(manifest.model_config.clone(), 0)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(io_err)?;
    let expected_scalars: usize = model.params().iter().map(|(_, p)| p.numel()).sum();
    if data.len() != expected_scalars * 4 {
        return Err(Error::CheckpointTruncated {
            expected: expected_scalars * 4,
            found: data.len(),
        });
    }

    // Validate the manifest's tensor table against the rebuilt model before
    // copying values in.
    {
        let params = model.params();
        if manifest.tensors.len() != params.len() {
            return Err(Error::CheckpointFormat(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                params.len()
            )));
        }
        for (info, (name, p)) in manifest.tensors.iter().zip(&params) {
            if &info.name != name || info.shape != p.value.shape {
                return Err(Error::CheckpointShape {
                    name: info.name.clone(),
                    found: info.shape.clone(),
                    expected: p.value.shape.clone(),
                });
            }
        }
    }

    let mut off = 0;
    for (_, p) in model.params_mut() {
        for v in &mut p.value.data {
            let bytes: [u8; 4] = data[off..off + 4].try_into().expect("length checked");
            *v = f64::from(f32::from_le_bytes(bytes));
            off += 4;
        }
    }
    Ok((model, manifest))
}

/// Load a checkpoint and require it to match an expected model config.
pub fn load_checkpoint_compatible(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(Model, Manifest)> {
    let (model, manifest) = load_checkpoint(path)?;
    if &manifest.model_config != expected {
        // Surface the first differing tensor shape for a concrete message.
        let probe = Model::new(expected.clone(), 0)?;
        for ((name, have), (_, want)) in model.params().iter().zip(probe.params().iter()) {
            if have.value.shape != want.value.shape {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: have.value.shape.clone(),
                    expected: want.value.shape.clone(),
                });
            }
        }
        return Err(Error::Config(
            "checkpoint config differs from the requested one".into(),
        ));
    }
    Ok((model, manifest))
}
