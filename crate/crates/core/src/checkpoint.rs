//! Checkpoint persistence: a JSON manifest (parameter names, shapes, byte
//! offsets, precision, config echo, vocab, seed) plus one raw little-endian
//! float blob. Round-trips are bit-exact at the stored precision.
//!
//! Inference checkpoints default to f32 storage (documented down-cast from
//! the f64 training state). Checkpoints that carry optimizer state for
//! resumption are stored at f64 so a resumed run continues the exact
//! trajectory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{CareError, Result};
use crate::model::{CareModel, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

/// Optimizer/trainer state for exact resumption; moments are always f64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStateEntry {
    pub step: u64,
    pub m_offset: u64,
    pub v_offset: u64,
    pub len: usize,
    pub best_val_ppl: Option<f64>,
    pub bad_evals: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub precision: Precision,
    pub seed: u64,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub vocab_min_freq: usize,
    pub vocab: Vec<String>,
    pub emotion_labels: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub train_state: Option<TrainStateEntry>,
}

/// Flattened trainer state carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub best_val_ppl: Option<f64>,
    pub bad_evals: u32,
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn push_floats(blob: &mut Vec<u8>, values: &[f64], precision: Precision) {
    match precision {
        Precision::F32 => {
            for v in values {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn read_floats(blob: &[u8], offset: u64, len: usize, precision: Precision) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start + len * precision.bytes();
    let bytes = blob.get(start..end).ok_or_else(|| {
        CareError::Checkpoint(format!("blob too short: need {end} bytes, have {}", blob.len()))
    })?;
    Ok(match precision {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
            .collect(),
    })
}

/// Write `<base>.json` and `<base>.bin`. A checkpoint carrying train state
/// must be stored at f64 (resume must be exact).
pub fn save_checkpoint(
    base: &Path,
    model: &CareModel,
    precision: Precision,
    seed: u64,
    vocab_min_freq: usize,
    train_state: Option<&TrainState>,
) -> Result<()> {
    if train_state.is_some() && precision != Precision::F64 {
        return Err(CareError::Checkpoint(
            "train-state checkpoints require f64 precision".into(),
        ));
    }
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tensor) in model.params() {
        let offset = blob.len() as u64;
        let data = tensor.to_vec();
        push_floats(&mut blob, &data, precision);
        entries.push(ParamEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset,
            len: data.len(),
        });
    }
    let train_entry = train_state.map(|ts| {
        let m_offset = blob.len() as u64;
        push_floats(&mut blob, &ts.adam_m, Precision::F64);
        let v_offset = blob.len() as u64;
        push_floats(&mut blob, &ts.adam_v, Precision::F64);
        TrainStateEntry {
            step: ts.step,
            m_offset,
            v_offset,
            len: ts.adam_m.len(),
            best_val_ppl: ts.best_val_ppl,
            bad_evals: ts.bad_evals,
        }
    });
    let manifest = CheckpointManifest {
        format_version: 1,
        precision,
        seed,
        config: model.config.clone(),
        vocab_hash: model.vocab.hash_hex(),
        vocab_min_freq,
        vocab: model.vocab.tokens().to_vec(),
        emotion_labels: model.emotion_labels.clone(),
        params: entries,
        train_state: train_entry,
    };
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut mf = std::fs::File::create(manifest_path(base))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    std::fs::write(blob_path(base), &blob)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: CareModel,
    pub manifest: CheckpointManifest,
    pub train_state: Option<TrainState>,
}

/// Rebuild a model from `<base>.json` + `<base>.bin`.
pub fn load_checkpoint(base: &Path) -> Result<LoadedCheckpoint> {
    let manifest_text = std::fs::read_to_string(manifest_path(base))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != 1 {
        return Err(CareError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(blob_path(base))?;
    let vocab = Vocab::from_tokens(manifest.vocab.clone())?;
    if vocab.hash_hex() != manifest.vocab_hash {
        return Err(CareError::Checkpoint("vocab hash does not match token list".into()));
    }
    let model = CareModel::init(
        manifest.config.clone(),
        vocab,
        manifest.emotion_labels.clone(),
        manifest.seed,
    );
    let params = model.params();
    if params.len() != manifest.params.len() {
        return Err(CareError::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            params.len(),
            manifest.params.len()
        )));
    }
    for ((name, tensor), entry) in params.iter().zip(&manifest.params) {
        if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(CareError::Checkpoint(format!(
                "parameter mismatch: model {name} {:?} vs checkpoint {} {:?}",
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let data = read_floats(&blob, entry.offset, entry.len, manifest.precision)?;
        tensor.set_data(&data);
    }
    let train_state = match &manifest.train_state {
        Some(ts) => Some(TrainState {
            step: ts.step,
            adam_m: read_floats(&blob, ts.m_offset, ts.len, Precision::F64)?,
            adam_v: read_floats(&blob, ts.v_offset, ts.len, Precision::F64)?,
            best_val_ppl: ts.best_val_ppl,
            bad_evals: ts.bad_evals,
        }),
        None => None,
    };
    Ok(LoadedCheckpoint {
        model,
        manifest,
        train_state,
    })
}
