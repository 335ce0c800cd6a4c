//! Checkpoints: a JSON manifest next to a binary blob with the same stem.
//!
//! Blob layout: `u64` little-endian value count, then every trainable tensor
//! in declaration order followed by each batch norm's running mean and
//! variance, all as little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::train::History;

const FORMAT: &str = "ksr-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    param_count: usize,
    value_count: usize,
    blob: String,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: &Path, model: &Model, epoch: usize, history: &History) -> Result<()> {
    let store = model.store();
    let n = store.blob_len();
    let mut bytes = Vec::with_capacity(8 + 4 * n);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for t in &store.tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for r in &store.running {
        for &v in r.mean.iter().chain(&r.var) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let blob = blob_path(path);
    write_atomic(&blob, &bytes)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        meta: CheckpointMeta {
            config: model.config().clone(),
            seed: model.seed(),
            epoch,
            history: history.clone(),
        },
        param_count: model.param_count(),
        value_count: n,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    write_atomic(path, &json)
}

/// Loads a checkpoint. When `expect` is given the stored configuration must
/// equal it.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<(Model, CheckpointMeta)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            detail: format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        });
    }
    let meta = manifest.meta;
    if let Some(cfg) = expect {
        if cfg != &meta.config {
            return Err(Error::Config(format!(
                "checkpoint config {:?} differs from expected {:?}",
                meta.config, cfg
            )));
        }
    }
    let mut model = Model::build(&meta.config, meta.seed)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let fmt_err = |offset: usize, detail: String| Error::Format {
        path: blob.clone(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 8 {
        return Err(fmt_err(0, format!("expected an 8-byte count, file has {} bytes", bytes.len())));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let expected = model.store().blob_len();
    if count != expected || count != manifest.value_count {
        return Err(fmt_err(
            0,
            format!("blob declares {count} values, configuration needs {expected}"),
        ));
    }
    if bytes.len() != 8 + 4 * count {
        return Err(fmt_err(
            bytes.len(),
            format!("expected {} bytes, found {}", 8 + 4 * count, bytes.len()),
        ));
    }
    let mut values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let store = model.store_mut();
    for t in &mut store.tensors {
        for v in t.data_mut() {
            *v = values.next().expect("count checked");
        }
    }
    for r in &mut store.running {
        for v in r.mean.iter_mut().chain(r.var.iter_mut()) {
            *v = values.next().expect("count checked");
        }
    }
    Ok((model, meta))
}
