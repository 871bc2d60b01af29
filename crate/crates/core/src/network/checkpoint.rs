//! Checkpoint container: a JSON manifest (tensor names, shapes, byte
//! offsets, config echo, format version, blob checksum) followed by one raw
//! little-endian 32-bit float blob.
//!
//! Layout: 8-byte magic, u64-LE manifest length, manifest JSON, blob.
//! Loading a 64-bit network from a checkpoint is exact only up to the f32
//! storage precision; f32 networks round-trip bitwise.

use super::backbone::BackboneSpec;
use super::model::{ModelKind, NFMNetwork};
use super::NetworkError;
use crate::attention::NFMConfig;
use crate::tensor::Element;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"NFMCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    element: String,
    kind: ModelKind,
    spec: BackboneSpec,
    config: NFMConfig,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize parameters and running statistics to `path`.
pub fn save_checkpoint<E: Element>(
    net: &NFMNetwork<E>,
    path: impl AsRef<Path>,
) -> Result<(), NetworkError> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let params = net.params();
    let stats = net.stats();
    for (name, shape, data) in params.iter().chain(stats.iter()) {
        let offset = blob.len() as u64;
        for &v in *data {
            blob.extend_from_slice(&(Element::to_f64(v) as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            byte_len: (data.len() * 4) as u64,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        element: "f32".into(),
        kind: net.kind,
        spec: net.spec.clone(),
        config: net.cfg.clone(),
        tensors,
        blob_bytes: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = Vec::with_capacity(16 + manifest_bytes.len() + blob.len());
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    file.extend_from_slice(&blob);
    std::fs::write(path, file)?;
    Ok(())
}

/// Rebuild a network from `path`, bitwise-identical to the saved one for
/// 32-bit networks. Version, integrity, and completeness failures are
/// reported as distinct errors.
pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<NFMNetwork<E>, NetworkError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(NetworkError::Truncated {
            needed: 16,
            got: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(NetworkError::BadCheckpoint(
            "file does not start with the checkpoint magic".into(),
        ));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16 + manifest_len;
    if bytes.len() < blob_start {
        return Err(NetworkError::Truncated {
            needed: blob_start,
            got: bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_start])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NetworkError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.element != "f32" {
        return Err(NetworkError::BadCheckpoint(format!(
            "unsupported element type {:?}",
            manifest.element
        )));
    }
    let blob = &bytes[blob_start..];
    if (blob.len() as u64) < manifest.blob_bytes {
        return Err(NetworkError::Truncated {
            needed: blob_start + manifest.blob_bytes as usize,
            got: bytes.len(),
        });
    }
    if blob.len() as u64 > manifest.blob_bytes {
        return Err(NetworkError::BadCheckpoint(format!(
            "{} trailing bytes after the declared blob",
            blob.len() as u64 - manifest.blob_bytes
        )));
    }
    if sha256_hex(blob) != manifest.blob_sha256 {
        return Err(NetworkError::ChecksumMismatch);
    }

    let mut net = NFMNetwork::build(manifest.spec, manifest.config, manifest.kind, 0)?;
    let mut by_name: HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(NetworkError::BadCheckpoint(
            "duplicate tensor names in manifest".into(),
        ));
    }
    fill_tensors(net.params_mut(), &mut by_name, blob)?;
    fill_tensors(net.stats_mut(), &mut by_name, blob)?;
    if let Some(name) = by_name.keys().next() {
        return Err(NetworkError::TensorMismatch {
            name: (*name).to_string(),
        });
    }
    Ok(net)
}

fn fill_tensors<E: Element>(
    targets: Vec<(String, &mut Vec<E>)>,
    by_name: &mut HashMap<&str, &TensorEntry>,
    blob: &[u8],
) -> Result<(), NetworkError> {
    for (name, data) in targets {
        let entry = by_name
            .remove(name.as_str())
            .ok_or_else(|| NetworkError::TensorMismatch { name: name.clone() })?;
        let count: usize = entry.shape.iter().product();
        if count != data.len() || entry.byte_len != (data.len() * 4) as u64 {
            return Err(NetworkError::TensorMismatch { name });
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > blob.len() {
            return Err(NetworkError::Truncated {
                needed: end,
                got: blob.len(),
            });
        }
        for (dst, src) in data.iter_mut().zip(blob[start..end].chunks_exact(4)) {
            *dst = E::from_f64(f32::from_le_bytes(src.try_into().expect("4 bytes")) as f64);
        }
    }
    Ok(())
}
