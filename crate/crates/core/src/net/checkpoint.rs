//! Versioned binary checkpoint blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "E2CK"
//! version u32      currently 1
//! count   u32      number of tensors
//! per tensor: name_len u16, name bytes (utf-8), ndim u32, dims u32 × ndim
//! payload: per tensor, in declaration order, f64 little-endian values
//! ```
//!
//! Values are stored as `f64` regardless of the scalar the engine ran in
//! (`f32` widens losslessly on write and rounds on read).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"E2CK";
pub const FORMAT_VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckpointEntry {
    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let dims = vec![data.len()];
        Self { name: name.into(), dims, data }
    }
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    for e in entries {
        let n: usize = e.dims.iter().product();
        if n != e.data.len() {
            return Err(Error::usage(format!(
                "checkpoint tensor '{}': dims {:?} disagree with {} values",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for d in &e.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
    }
    for e in entries {
        for v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(format!("checkpoint truncated while reading {what}")))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    read_exact(&mut r, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        read_exact(&mut r, &mut u16buf, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not utf-8"))?;
        read_exact(&mut r, &mut u32buf, "ndim")?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact(&mut r, &mut u32buf, "dim")?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        headers.push((name, dims));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dims) in headers {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut f64buf, "tensor data")?;
            data.push(f64::from_le_bytes(f64buf));
        }
        entries.push(CheckpointEntry { name, dims, data });
    }
    Ok(entries)
}

/// Find a tensor by name.
pub fn find_entry<'a>(entries: &'a [CheckpointEntry], name: &str) -> Result<&'a CheckpointEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format(format!("checkpoint is missing tensor '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_exact_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let entries = vec![
            CheckpointEntry::vector("actor", vec![0.1, -2.5e-300, f64::MIN_POSITIVE, -0.0]),
            CheckpointEntry { name: "critic".into(), dims: vec![2, 3], data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] },
        ];
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "actor");
        assert_eq!(back[1].dims, vec![2, 3]);
        for (a, b) in entries[0].data.iter().zip(back[0].data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(find_entry(&back, "critic").is_ok());
        assert!(find_entry(&back, "nonexistent").is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let entries = vec![CheckpointEntry::vector("v", vec![1.0, 2.0, 3.0])];
        write_checkpoint(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn dim_mismatch_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let entry = CheckpointEntry { name: "v".into(), dims: vec![4], data: vec![1.0] };
        assert!(write_checkpoint(&path, &[entry]).is_err());
    }
}
