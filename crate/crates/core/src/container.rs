//! Framed binary artifact files.
//!
//! Every binary artifact (concept matrices, encode checkpoints, model
//! checkpoints, embedding tables) shares one layout:
//!
//! ```text
//! <one line of JSON metadata>\n
//! <payload bytes>
//! <32-byte SHA-256 over the metadata line and the payload>
//! ```
//!
//! Numeric payloads are little-endian `f32`. Writes go to a temporary file in
//! the target directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::hashing::sha256;

pub const CHECKSUM_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("invalid metadata in {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },
}

impl ContainerError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ContainerError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Encode a framed artifact into bytes.
pub fn encode_framed<H: Serialize>(header: &H, payload: &[u8]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("metadata serializes");
    debug_assert!(!out.contains(&b'\n'));
    out.push(b'\n');
    out.extend_from_slice(payload);
    let digest = sha256(&out);
    out.extend_from_slice(&digest);
    out
}

/// Split and verify a framed artifact. Returns the raw header line (without
/// the newline) and the payload.
pub fn decode_framed<'a>(path: &Path, bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8]), ContainerError> {
    let integrity = |reason: &str| ContainerError::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < CHECKSUM_LEN + 1 {
        return Err(integrity("file too short"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if sha256(body) != stored {
        return Err(integrity("checksum mismatch"));
    }
    let newline = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| integrity("missing metadata line"))?;
    Ok((&body[..newline], &body[newline + 1..]))
}

pub fn write_framed<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<(), ContainerError> {
    atomic_write(path, &encode_framed(header, payload))
}

pub fn read_framed<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>), ContainerError> {
    let bytes = fs::read(path).map_err(|e| ContainerError::io(path, e))?;
    let (header, payload) = decode_framed(path, &bytes)?;
    let header = serde_json::from_slice(header).map_err(|e| ContainerError::Metadata {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((header, payload.to_vec()))
}

/// Write-temp-then-rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| ContainerError::io(&dir, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    {
        let mut file = fs::File::create(&tmp).map_err(|e| ContainerError::io(&tmp, e))?;
        file.write_all(bytes).map_err(|e| ContainerError::io(&tmp, e))?;
        file.sync_all().map_err(|e| ContainerError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| ContainerError::io(path, e))
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}
