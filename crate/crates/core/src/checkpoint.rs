//! Checkpoint container: a JSON manifest (layer names, shapes, and the model
//! configuration) followed by the raw little-endian f64 arrays in manifest
//! order. One file holds the model parameters, optimizer momentum, and the
//! training step, so runs can resume exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, TrackModel};

const MAGIC: &[u8; 6] = b"MFTK1\n";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    fusion: FusionConfig,
    model: ModelConfig,
    build_seed: u64,
    step: u64,
    params: Vec<EntryMeta>,
    momentum: Vec<EntryMeta>,
}

/// Optimizer state that travels with the parameters.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub step: u64,
    pub momentum: Vec<(String, ArrayD<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &TrackModel,
    build_seed: u64,
    state: &TrainState,
) -> Result<()> {
    let mut params: Vec<(String, &ArrayD<f64>)> = Vec::new();
    model.visit(|_, name, arr| params.push((name, arr)));

    let manifest = Manifest {
        version: 1,
        fusion: model.fusion.clone(),
        model: model.config.clone(),
        build_seed,
        step: state.step,
        params: params
            .iter()
            .map(|(n, a)| EntryMeta {
                name: n.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
        momentum: state
            .momentum
            .iter()
            .map(|(n, a)| EntryMeta {
                name: n.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut write = |buf: &[u8]| file.write_all(buf).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, arr) in params.iter() {
        for v in arr.iter() {
            write(&v.to_le_bytes())?;
        }
    }
    for (_, arr) in &state.momentum {
        for v in arr.iter() {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrackModel, u64, TrainState)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;

    let mut read_array = |shape: &[usize]| -> Result<ArrayD<f64>> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals)
            .map_err(|e| Error::Checkpoint(format!("array shape: {e}")))
    };

    let mut model = TrackModel::build(&manifest.model, &manifest.fusion, manifest.build_seed)?;
    let mut loaded = std::collections::BTreeMap::new();
    for meta in &manifest.params {
        loaded.insert(meta.name.clone(), read_array(&meta.shape)?);
    }
    let mut missing = Vec::new();
    model.visit_mut(|_, name, arr| match loaded.get(&name) {
        Some(v) if v.shape() == arr.shape() => *arr = v.clone(),
        Some(v) => missing.push(format!("{name}: shape {:?} vs {:?}", v.shape(), arr.shape())),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter mismatch: {}",
            path.display(),
            missing.join("; ")
        )));
    }

    let mut momentum = Vec::new();
    for meta in &manifest.momentum {
        momentum.push((meta.name.clone(), read_array(&meta.shape)?));
    }
    Ok((
        model,
        manifest.build_seed,
        TrainState {
            step: manifest.step,
            momentum,
        },
    ))
}
