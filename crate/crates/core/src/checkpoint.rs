//! Checkpoint directories: `manifest.json` describing every parameter and
//! `weights.bin` holding the parameters as little-endian `f32`, concatenated
//! in manifest order. The manifest carries the blob's SHA-256, checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub blob: String,
    pub blob_bytes: usize,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
    pub params: Vec<ParamEntry>,
}

/// The blob bytes and manifest for `model`.
pub fn encode(model: &Model) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.parameter_count().total * 4);
    let mut params = Vec::new();
    for (name, a) in model.named_params() {
        let offset = blob.len();
        for v in a.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamEntry {
            name,
            shape: a.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        blob: BLOB_FILE.into(),
        blob_bytes: blob.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
        params,
    };
    (manifest, blob)
}

/// Content hash of a model: the SHA-256 its checkpoint blob would carry.
pub fn model_hash(model: &Model) -> String {
    encode(model).0.sha256
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `dir/manifest.json` and `dir/weights.bin`; returns the manifest.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model);
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(&manifest.blob);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&manifest, &blob)
}

/// Rebuilds a model from a manifest and blob, verifying hash and shapes.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Model> {
    let actual = hex::encode(Sha256::digest(blob));
    if actual != manifest.sha256 || blob.len() != manifest.blob_bytes {
        return Err(Error::HashMismatch {
            expected: manifest.sha256.clone(),
            actual,
            len: blob.len(),
            expected_len: manifest.blob_bytes,
        });
    }
    manifest.config.validate()?;
    let mut model = Model::init(&manifest.config, 0)?;
    let mut params = model.named_params_mut();
    if params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, the configured model has {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for ((name, p), e) in params.iter_mut().zip(&manifest.params) {
        if *name != e.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: manifest has `{}` where the model expects `{name}`",
                e.name
            )));
        }
        if p.shape() != e.shape.as_slice() || e.bytes != p.numel() * 4 {
            return Err(Error::Checkpoint(format!(
                "`{name}`: manifest shape {:?} ({} bytes), model shape {:?}",
                e.shape,
                e.bytes,
                p.shape()
            )));
        }
        let bytes = blob
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` lies outside the blob")))?;
        for (v, c) in p.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        }
    }
    drop(params);
    model.check()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamLayout;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            depth: 3,
            d_model: 16,
            n_heads: 2,
            mlp_hidden: 32,
            layout: StreamLayout::hybrid(1, 2),
            ..Default::default()
        };
        let mut m = Model::init(&cfg, 4).unwrap();
        for (_, p) in m.named_params_mut() {
            p.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += i as f32 * 1e-3);
        }
        let dir = tempfile::tempdir().unwrap();
        let a = save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.named_params(), m.named_params());
        assert_eq!(back.config, m.config);
        let bytes1 = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let b = save_checkpoint(&back, dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes1, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn truncated_blob_names_both_lengths() {
        let cfg = ModelConfig {
            depth: 2,
            d_model: 8,
            n_heads: 2,
            mlp_hidden: 16,
            layout: StreamLayout::all_dual(2),
            ..Default::default()
        };
        let m = Model::init(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let man = save_checkpoint(&m, dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::HashMismatch { len, expected_len, .. }) => {
                assert_eq!(len, man.blob_bytes - 4);
                assert_eq!(expected_len, man.blob_bytes);
            }
            other => panic!("expected hash mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
