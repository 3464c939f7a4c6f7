//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian u32 header length, JSON header
//! (kind, config, parameter layout, extras), then the raw f32 payload in
//! slot order. Loading reconstructs the model from the header config and
//! rejects layout or vocabulary mismatches.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CueError, Result};
use crate::nn::param::{ParamMeta, ParamStore};

const MAGIC: &[u8; 8] = b"CUECKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: Vec<ParamMeta>,
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<u8>,
    pub digest: String,
}

/// Writes a checkpoint and returns the file digest.
pub fn save_model<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    extra: BTreeMap<String, serde_json::Value>,
    store: &ParamStore,
) -> Result<String> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| CueError::json("checkpoint config", e))?,
        extra,
        params: store.metas().to_vec(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CueError::json("checkpoint header", e))?;
    let payload = store.to_bytes();
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, &bytes).map_err(|e| CueError::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_model(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| CueError::io(path.display().to_string(), e))?;
    let incompatible = |reason: &str| CueError::IncompatibleCheckpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(incompatible("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(incompatible("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| CueError::json(format!("checkpoint header of {}", path.display()), e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(incompatible(&format!(
            "format version {} (supported: {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok(LoadedCheckpoint {
        header,
        payload: bytes[12 + header_len..].to_vec(),
        digest,
    })
}

/// Copies the payload into a freshly constructed store, verifying the
/// parameter layout matches slot by slot.
pub fn apply_payload(store: &mut ParamStore, loaded: &LoadedCheckpoint, path: &Path) -> Result<()> {
    let mine = store.metas();
    let theirs = &loaded.header.params;
    if mine.len() != theirs.len()
        || mine
            .iter()
            .zip(theirs)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape || a.group != b.group)
    {
        return Err(CueError::IncompatibleCheckpoint {
            path: path.display().to_string(),
            reason: "parameter layout mismatch".into(),
        });
    }
    store.load_bytes(&loaded.payload)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CueError::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentence_encoder::{SentenceEncoder, SentenceEncoderConfig};

    #[test]
    fn round_trip_preserves_parameters() {
        let cfg = SentenceEncoderConfig {
            vocab_size: 64,
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 1,
            max_len: 8,
            tied_head: true,
            variant: crate::sentence_encoder::SentenceEncoderVariant::Transformer,
        };
        let enc = SentenceEncoder::new(cfg.clone(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let digest = save_model(&path, "sentence-encoder", &cfg, BTreeMap::new(), &enc.store)
            .unwrap();
        assert_eq!(digest, file_digest(&path).unwrap());

        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.header.kind, "sentence-encoder");
        let restored_cfg: SentenceEncoderConfig =
            serde_json::from_value(loaded.header.config.clone()).unwrap();
        let mut restored = SentenceEncoder::new(restored_cfg, 0).unwrap();
        apply_payload(&mut restored.store, &loaded, &path).unwrap();
        assert!(restored.store.diff_names(&enc.store).is_empty());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let cfg_small = SentenceEncoderConfig {
            vocab_size: 32,
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 1,
            max_len: 8,
            tied_head: true,
            variant: crate::sentence_encoder::SentenceEncoderVariant::Transformer,
        };
        let enc = SentenceEncoder::new(cfg_small.clone(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_model(&path, "sentence-encoder", &cfg_small, BTreeMap::new(), &enc.store).unwrap();
        let loaded = load_model(&path).unwrap();
        let mut bigger = SentenceEncoder::new(
            SentenceEncoderConfig {
                vocab_size: 64,
                ..cfg_small
            },
            0,
        )
        .unwrap();
        let err = apply_payload(&mut bigger.store, &loaded, &path).unwrap_err();
        assert!(matches!(err, CueError::IncompatibleCheckpoint { .. }));
    }
}
