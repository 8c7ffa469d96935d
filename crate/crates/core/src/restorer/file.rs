//! Parameter files.
//!
//! Layout: magic `RCW1`; `u32` length and UTF-8 bytes of the architecture
//! descriptor; `u64` parameter count; the parameters as little-endian `f32`
//! in canonical layer order (see [`Architecture::layouts`]); and a trailing
//! `u64` checksum, the first eight bytes (little-endian) of the SHA-256 of
//! everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::conv::{Architecture, RestorerParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"RCW1";

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn encode_params(params: &RestorerParams<f32>) -> Vec<u8> {
    let desc = params.arch().descriptor();
    let mut buf = Vec::with_capacity(24 + desc.len() + 4 * params.len());
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(desc.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

impl RestorerParams<f32> {
    /// Checksum of the encoded parameter file contents.
    pub fn checksum(&self) -> u64 {
        let bytes = encode_params(self);
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<RestorerParams<f32>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() < 24 || &bytes[..4] != PARAMS_MAGIC {
        return Err(bad("missing RCW1 header".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.to_path_buf(), stored, computed });
    }
    let desc_len = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let desc_end = 8 + desc_len;
    if body.len() < desc_end + 8 {
        return Err(bad("truncated descriptor".into()));
    }
    let desc = std::str::from_utf8(&body[8..desc_end]).map_err(|_| bad("descriptor is not UTF-8".into()))?;
    let arch = Architecture::parse_descriptor(desc)?;
    let count = u64::from_le_bytes(body[desc_end..desc_end + 8].try_into().unwrap()) as usize;
    let payload = &body[desc_end + 8..];
    if payload.len() != 4 * count {
        return Err(bad(format!("expected {count} parameters, found {} bytes", payload.len())));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    RestorerParams::from_values(arch, values)
}

pub fn save_params(params: &RestorerParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<RestorerParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

/// Loads parameters and checks they were saved for `expected`.
pub fn load_params_expecting(path: &Path, expected: &Architecture) -> Result<RestorerParams<f32>> {
    let params = load_params(path)?;
    if params.arch() != expected {
        return Err(Error::Architecture { expected: expected.descriptor(), found: params.arch().descriptor() });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(size: usize) -> Architecture {
        Architecture { image_size: size, width: 3, dilations: vec![1, 2, 1], embed_dim: 4, max_step: 3 }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rcw");
        let params = RestorerParams::<f32>::init(arch(16), 5).unwrap();
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        let bits = |p: &RestorerParams<f32>| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&params));
        assert_eq!(back.arch(), params.arch());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rcw");
        save_params(&RestorerParams::<f32>::init(arch(16), 5).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_params(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn other_image_size_is_an_architecture_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rcw");
        save_params(&RestorerParams::<f32>::init(arch(16), 5).unwrap(), &path).unwrap();
        assert!(load_params_expecting(&path, &arch(16)).is_ok());
        assert!(matches!(load_params_expecting(&path, &arch(32)), Err(Error::Architecture { .. })));
    }
}
