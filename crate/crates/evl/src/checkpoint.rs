//! Bit-exact named-tensor archive ("EVLT" format, version 1).
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! magic "EVLT" | version = 1 | entry count
//! per entry: name length | name bytes (UTF-8) | rank | dims... | f32 LE payload
//! ```
//!
//! Scalars are stored as rank 1, dim 1. Only f32 payloads exist in version 1.
//! `save -> load -> save` is byte-idempotent and loading validates every
//! declared length against the remaining file size before allocating.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVLT";
pub const VERSION: u32 = 1;

/// Ordered named-tensor container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointArchive {
    entries: Vec<(String, Tensor)>,
}

impl CheckpointArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("duplicate entry name {name}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose name starts with `prefix`, preserving order.
    pub fn subset(&self, prefix: &str) -> CheckpointArchive {
        CheckpointArchive {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Serialized byte image (identical to the on-disk file).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(name_bytes);
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32("entry count")? as usize;
        let mut archive = CheckpointArchive::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            if name_len > r.remaining() {
                return Err(Error::Corrupt(format!(
                    "entry {i}: declared name length {name_len} exceeds remaining {} bytes",
                    r.remaining()
                )));
            }
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&format!("rank of {name}"))? as usize;
            if rank == 0 || rank.saturating_mul(4) > r.remaining() {
                return Err(Error::Corrupt(format!(
                    "entry {name}: rank {rank} invalid for remaining {} bytes",
                    r.remaining()
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = r.u32(&format!("dim of {name}"))? as u64;
                if d == 0 {
                    return Err(Error::Corrupt(format!("entry {name}: zero dimension")));
                }
                numel = numel.saturating_mul(d);
                shape.push(d as usize);
            }
            let payload = numel.saturating_mul(4);
            if payload > r.remaining() as u64 {
                return Err(Error::Corrupt(format!(
                    "entry {name}: declared payload of {payload} bytes exceeds remaining {}",
                    r.remaining()
                )));
            }
            let raw = r.take(payload as usize, "payload")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            if archive.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate entry name {name}")));
            }
            archive.push(&name, tensor)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last entry",
                r.remaining()
            )));
        }
        Ok(archive)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Corrupt(format!(
                "file truncated while reading {what} ({} of {n} bytes left)",
                self.remaining()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn empty_archive_is_twelve_bytes() {
        let bytes = CheckpointArchive::new().to_bytes();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
    }

    #[test]
    fn single_scalar_entry_is_29_bytes() {
        let mut a = CheckpointArchive::new();
        a.push("b", Tensor::scalar(1.0)).unwrap();
        // magic+version+count (12) + name len (4) + "b" (1) + rank (4)
        // + one dim (4) + payload (4)
        assert_eq!(a.to_bytes().len(), 29);
    }

    #[test]
    fn roundtrip_and_byte_idempotence_on_random_archive() {
        let mut rng = Rng::new(77);
        let mut archive = CheckpointArchive::new();
        for i in 0..100 {
            let rank = 1 + rng.next_below(3);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.next_below(5)).collect();
            archive
                .push(&format!("tensor.{i}"), Tensor::randn(&shape, 1.0, &mut rng))
                .unwrap();
        }
        let bytes = archive.to_bytes();
        let loaded = CheckpointArchive::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, archive);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = CheckpointArchive::new().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            CheckpointArchive::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_names_the_entry() {
        let mut a = CheckpointArchive::new();
        a.push("weights", Tensor::zeros(&[4])).unwrap();
        let bytes = a.to_bytes();
        let err = CheckpointArchive::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Corrupt(msg) => assert!(msg.contains("weights"), "{msg}"),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_declared_dims_rejected_before_allocation() {
        // Header claims a 4-billion-element tensor in a tiny file.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            CheckpointArchive::from_bytes(&bytes),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected_on_load_and_push() {
        let mut a = CheckpointArchive::new();
        a.push("x", Tensor::scalar(1.0)).unwrap();
        assert!(a.push("x", Tensor::scalar(2.0)).is_err());

        // Hand-build a file with two entries of the same name.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.push(b'x');
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            CheckpointArchive::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.evlt");
        let mut rng = Rng::new(5);
        let mut a = CheckpointArchive::new();
        a.push("w", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        a.save(&path).unwrap();
        let b = CheckpointArchive::load(&path).unwrap();
        assert_eq!(a, b);
        // Re-save must be byte-identical.
        let path2 = dir.path().join("weights2.evlt");
        b.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn roundtrip_value_identity(seed in 0u64..10_000, n in 0usize..12) {
            let mut rng = crate::rng::Rng::new(seed);
            let mut archive = CheckpointArchive::new();
            for i in 0..n {
                let rank = 1 + rng.next_below(4);
                let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.next_below(4)).collect();
                archive.push(&format!("t{i}"), Tensor::randn(&shape, 2.0, &mut rng)).unwrap();
            }
            let bytes = archive.to_bytes();
            let loaded = CheckpointArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&loaded, &archive);
            prop_assert_eq!(loaded.to_bytes(), bytes);
        }
    }
}
