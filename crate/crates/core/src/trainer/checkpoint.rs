//! Single-file model checkpoints: `FCKP` magic, format version, a JSON
//! header, then every matrix as a double-precision FEMB blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::CacheModel;
use crate::dataset::femb::{self, Precision};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::prior::{PriorMode, PriorModel, PriorParams};

const MAGIC: &[u8; 4] = b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    mode: PriorMode,
    beta: f64,
    tau: f64,
    frozen_mask: Vec<bool>,
    labeled_mask: Vec<bool>,
    num_classes: usize,
    tokens_per_class: usize,
}

pub fn snapshot(cache: &CacheModel, prior: &PriorModel) -> Vec<u8> {
    let mut blobs: Vec<&Matrix> = vec![&cache.keys, &cache.value_logits];
    let tokens_per_class = match &prior.params {
        PriorParams::Prototype { features } => {
            blobs.push(features);
            0
        }
        PriorParams::ToyEncoder {
            base_tokens,
            prompt_tokens,
            tokens_per_class,
            encoder,
        } => {
            blobs.push(encoder);
            blobs.push(prompt_tokens);
            blobs.extend(base_tokens);
            *tokens_per_class
        }
    };
    let header = Header {
        mode: prior.mode(),
        beta: cache.beta,
        tau: prior.tau,
        frozen_mask: cache.frozen_mask.clone(),
        labeled_mask: cache.labeled_mask.clone(),
        num_classes: prior.num_classes(),
        tokens_per_class,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in blobs {
        out.extend(femb::encode(m, Precision::F64));
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Inverse of [`snapshot`]. With `expected` set, a checkpoint of the other
/// prior mode is refused.
pub fn restore(bytes: &[u8], expected: Option<PriorMode>) -> Result<(CacheModel, PriorModel)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(json_len))
        .ok_or_else(|| corrupt("header truncated"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if let Some(want) = expected {
        if want != header.mode {
            return Err(Error::ModeMismatch {
                expected: want.to_string(),
                found: header.mode.to_string(),
            });
        }
    }

    let mut rest = &bytes[16 + json_len..];
    let mut next = || -> Result<Matrix> {
        let (m, used) =
            femb::decode(rest, Path::new("<checkpoint>")).map_err(|e| corrupt(e.to_string()))?;
        rest = &rest[used..];
        Ok(m)
    };
    let keys = next()?;
    let value_logits = next()?;
    let params = match header.mode {
        PriorMode::Prototype => PriorParams::Prototype { features: next()? },
        PriorMode::ToyEncoder => {
            let encoder = next()?;
            let prompt_tokens = next()?;
            let base_tokens = (0..header.num_classes)
                .map(|_| next())
                .collect::<Result<_>>()?;
            PriorParams::ToyEncoder {
                base_tokens,
                prompt_tokens,
                tokens_per_class: header.tokens_per_class,
                encoder,
            }
        }
    };
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", rest.len())));
    }
    let n = keys.rows();
    if value_logits.rows() != n || header.frozen_mask.len() != n || header.labeled_mask.len() != n {
        return Err(corrupt("cache sections disagree on length"));
    }
    let cache = CacheModel {
        keys,
        value_logits,
        frozen_mask: header.frozen_mask,
        labeled_mask: header.labeled_mask,
        beta: header.beta,
    };
    let prior = PriorModel {
        params,
        tau: header.tau,
    };
    Ok((cache, prior))
}

pub fn save_checkpoint(path: &Path, cache: &CacheModel, prior: &PriorModel) -> Result<()> {
    std::fs::write(path, snapshot(cache, prior))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<PriorMode>,
) -> Result<(CacheModel, PriorModel)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    restore(&bytes, expected)
}
