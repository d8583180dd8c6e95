//! Checkpoint directory layout:
//!
//! * `manifest.json`: model config, RFF settings, free-form metadata and an
//!   ordered tensor table `{name, shape, dtype, byte_offset}`.
//! * `weights.bin`: the tensors concatenated in table order, row-major,
//!   little-endian.
//!
//! The frozen Fourier projection is stored alongside the trainable tensors
//! so loading never resamples it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights, Params};
use crate::error::{Error, Result};
use crate::tpe::{PhaseDist, RffParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "lfm3d-checkpoint/1";

/// Free-form string metadata stored in the manifest.
pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RffEntry {
    dim: usize,
    sigma: f64,
    seed: u64,
    phase_dist: PhaseDist,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    tensor_name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    rff: RffEntry,
    #[serde(default)]
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    total_bytes: usize,
}

fn all_tensors(w: &ModelWeights) -> Vec<(String, ArrayViewD<'_, f64>)> {
    let mut out = vec![
        ("rff.omega".to_string(), w.rff.omega.view().into_dyn()),
        ("rff.phase".to_string(), w.rff.phase.view().into_dyn()),
    ];
    out.extend(w.params.named());
    out
}

pub fn save_checkpoint(dir: &Path, w: &ModelWeights, dtype: Dtype, metadata: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, view) in all_tensors(w) {
        tensors.push(TensorEntry {
            tensor_name: name,
            shape: view.shape().to_vec(),
            dtype,
            byte_offset: bytes.len(),
        });
        for &v in view.iter() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: w.config.clone(),
        rff: RffEntry {
            dim: w.rff.dim,
            sigma: w.rff.sigma,
            seed: w.rff.seed,
            phase_dist: w.rff.phase_dist,
        },
        metadata: metadata.clone(),
        tensors,
        total_bytes: bytes.len(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, bytes).map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}

fn read_values(bytes: &[u8], entry: &TensorEntry) -> Result<Vec<f64>> {
    let count: usize = entry.shape.iter().product();
    let width = entry.dtype.width();
    let end = entry.byte_offset + count * width;
    let chunk = bytes.get(entry.byte_offset..end).ok_or_else(|| {
        Error::Checkpoint(format!(
            "tensor `{}` runs past the end of {WEIGHTS_FILE}",
            entry.tensor_name
        ))
    })?;
    Ok(match entry.dtype {
        Dtype::F64 => chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelWeights, CheckpointMeta)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    manifest.config.validate()?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if bytes.len() != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "{WEIGHTS_FILE} holds {} bytes, manifest declares {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * t.dtype.width())
        .sum();
    if expected != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "tensor table covers {expected} bytes, manifest declares {}",
            manifest.total_bytes
        )));
    }

    let config = manifest.config.clone();
    let half = config.dim / 2;
    if manifest.rff.dim != config.dim {
        return Err(Error::Checkpoint("RFF dimension disagrees with model dim".into()));
    }
    let mut rff = RffParams {
        omega: Array2::zeros((2, half)),
        phase: Array1::zeros(half),
        dim: config.dim,
        sigma: manifest.rff.sigma,
        seed: manifest.rff.seed,
        phase_dist: manifest.rff.phase_dist,
    };
    let mut params = Params::init(&config, &mut ChaCha8Rng::seed_from_u64(0));

    let mut targets = vec![
        ("rff.omega".to_string(), rff.omega.view_mut().into_dyn()),
        ("rff.phase".to_string(), rff.phase.view_mut().into_dyn()),
    ];
    targets.extend(params.named_mut());
    if targets.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, configuration needs {}",
            manifest.tensors.len(),
            targets.len()
        )));
    }
    for ((name, mut view), entry) in targets.into_iter().zip(&manifest.tensors) {
        if name != entry.tensor_name || view.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{name}` {:?}, found `{}` {:?}",
                view.shape(),
                entry.tensor_name,
                entry.shape
            )));
        }
        for (dst, src) in view.iter_mut().zip(read_values(&bytes, entry)?) {
            *dst = src;
        }
    }
    Ok((ModelWeights { config, rff, params }, manifest.metadata))
}
