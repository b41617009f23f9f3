//! Shared binary container: magic bytes, JSON manifest, raw blob.
//!
//! Layout: 8 magic bytes, 4-byte little-endian manifest length, UTF-8 JSON
//! manifest, then an opaque blob addressed by byte offsets stored in the
//! manifest. Both the corpus file and model checkpoints use this shape with
//! different magics.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const CORPUS_MAGIC: &[u8; 8] = b"MBLABCO1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBLABCK1";

#[derive(Debug)]
pub struct Container {
    pub manifest: Vec<u8>,
    pub blob: Vec<u8>,
}

pub fn write_container(path: &Path, magic: &[u8; 8], manifest: &[u8], blob: &[u8]) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    if manifest.len() > u32::MAX as usize {
        return Err(Error::format("manifest exceeds 4-byte length field"));
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(magic).map_err(io_err)?;
    f.write_all(&(manifest.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(manifest).map_err(io_err)?;
    f.write_all(blob).map_err(io_err)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<Container> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 12 {
        return Err(Error::format(format!(
            "{}: file too short ({} bytes) for header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            &bytes[..8],
            magic
        )));
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if 12 + mlen > bytes.len() {
        return Err(Error::format(format!(
            "{}: manifest length {} overruns file of {} bytes",
            path.display(),
            mlen,
            bytes.len()
        )));
    }
    let manifest = bytes[12..12 + mlen].to_vec();
    let blob = bytes[12 + mlen..].to_vec();
    Ok(Container { manifest, blob })
}

/// Read `n` little-endian f32 values starting at byte `offset` of `blob`.
pub fn read_f32s(blob: &[u8], offset: usize, n: usize) -> Result<Vec<f32>> {
    let end = offset
        .checked_add(n * 4)
        .ok_or_else(|| Error::format("f32 range overflows"))?;
    if end > blob.len() {
        return Err(Error::format(format!(
            "f32 range at byte offset {offset} (+{} bytes) exceeds blob of {} bytes",
            n * 4,
            blob.len()
        )));
    }
    Ok(blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_u16s(blob: &[u8], offset: usize, n: usize) -> Result<Vec<u16>> {
    let end = offset
        .checked_add(n * 2)
        .ok_or_else(|| Error::format("u16 range overflows"))?;
    if end > blob.len() {
        return Err(Error::format(format!(
            "u16 range at byte offset {offset} (+{} bytes) exceeds blob of {} bytes",
            n * 2,
            blob.len()
        )));
    }
    Ok(blob[offset..end]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) {
    blob.reserve(values.len() * 4);
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn push_u16s(blob: &mut Vec<u8>, values: &[u16]) {
    blob.reserve(values.len() * 2);
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips_and_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_container(&path, CORPUS_MAGIC, b"{\"a\":1}", &[1, 2, 3]).unwrap();
        let c = read_container(&path, CORPUS_MAGIC).unwrap();
        assert_eq!(c.manifest, b"{\"a\":1}");
        assert_eq!(c.blob, &[1, 2, 3]);
        assert!(read_container(&path, CHECKPOINT_MAGIC).is_err());
    }

    #[test]
    fn truncated_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CORPUS_MAGIC);
        bytes.extend_from_slice(&100u32.to_le_bytes());
        bytes.extend_from_slice(b"short");
        std::fs::write(&path, bytes).unwrap();
        let err = read_container(&path, CORPUS_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn scalar_codecs_round_trip() {
        let mut blob = Vec::new();
        push_f32s(&mut blob, &[1.5, -0.25, 3.0e-8]);
        push_u16s(&mut blob, &[7, 65535, 0]);
        assert_eq!(read_f32s(&blob, 0, 3).unwrap(), vec![1.5, -0.25, 3.0e-8]);
        assert_eq!(read_u16s(&blob, 12, 3).unwrap(), vec![7, 65535, 0]);
        assert!(read_f32s(&blob, 8, 3).is_err());
    }
}
