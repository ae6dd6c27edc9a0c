//! JSON checkpoints for trained models.
//!
//! Floats are written with shortest round-trip formatting, so a reloaded
//! model reproduces the saved one bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::count_model::{CountModel, CountModelConfig};
use crate::error::{Error, Result};
use crate::event_model::{EventModel, EventModelConfig};
use crate::event_stream::MarkVocab;
use crate::neural::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EventCheckpoint {
    version: u32,
    kind: String,
    config: EventModelConfig,
    vocab: MarkVocab,
    gap_mean: f64,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CountCheckpoint {
    version: u32,
    kind: String,
    config: CountModelConfig,
    params: ParamStore,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = serde_json::to_vec(value)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn read_checkpoint(path: &Path, kind: &str) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {kind} checkpoint {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{} is not a valid checkpoint: {e}", path.display())))?;
    let found = value.get("kind").and_then(|k| k.as_str()).unwrap_or("?");
    if found != kind {
        return Err(Error::Checkpoint(format!("{} holds a {found} model, expected {kind}", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    Ok(value)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes the model and returns the SHA-256 of the file contents.
pub fn save_event_model(model: &EventModel, path: &Path) -> Result<String> {
    write_json(
        &EventCheckpoint {
            version: FORMAT_VERSION,
            kind: "event".into(),
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            gap_mean: model.gap_mean,
            params: model.params.clone(),
        },
        path,
    )
}

pub fn load_event_model(path: &Path) -> Result<EventModel> {
    let c: EventCheckpoint = serde_json::from_value(read_checkpoint(path, "event")?)?;
    EventModel::from_parts(c.config, c.vocab, c.gap_mean, c.params)
}

pub fn save_count_model(model: &CountModel, path: &Path) -> Result<String> {
    write_json(
        &CountCheckpoint {
            version: FORMAT_VERSION,
            kind: "count".into(),
            config: model.config.clone(),
            params: model.params.clone(),
        },
        path,
    )
}

pub fn load_count_model(path: &Path) -> Result<CountModel> {
    let c: CountCheckpoint = serde_json::from_value(read_checkpoint(path, "count")?)?;
    CountModel::from_parts(c.config, c.params)
}
