//! Versioned binary container for named f32 tensors, shared by extractor
//! weights and training checkpoints. Layout: magic, version, JSON metadata,
//! tensor table, SHA-256 trailer over everything before it.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub struct TensorFile {
    pub version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorFile {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity(format!("container is missing tensor '{name}'")))
    }
}

/// Serialize tensors and metadata, writing atomically via a sibling
/// temporary file.
pub fn write_tensors(
    path: &Path,
    magic: &[u8; 4],
    meta: &serde_json::Value,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("metadata serializes");
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        assert!(shape.len() <= u8::MAX as usize);
        buf.push(shape.len() as u8);
        for &dim in shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        let standard = tensor.as_standard_layout();
        for v in standard.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp_dir = dir.unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(tmp_dir).map_err(|e| Error::io(tmp_dir, e))?;
    tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Integrity("container truncated".into()));
        }
        let slice = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read and verify a container written by [`write_tensors`].
pub fn read_tensors(path: &Path, magic: &[u8; 4]) -> Result<TensorFile> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 32 + 4 {
        return Err(Error::Integrity("container truncated".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Integrity("container checksum mismatch".into()));
    }
    let mut reader = Reader { buf: body, at: 0 };
    let found_magic = reader.take(4)?;
    if found_magic != magic {
        return Err(Error::Integrity(format!(
            "bad container magic: expected {:?}, found {:?}",
            magic, found_magic
        )));
    }
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported container version: expected {FORMAT_VERSION}, found {version}"
        )));
    }
    let meta_len = reader.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(reader.take(meta_len)?)
        .map_err(|e| Error::Integrity(format!("bad container metadata: {e}")))?;
    let count = reader.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = reader.u16()? as usize;
        let name = String::from_utf8(reader.take(name_len)?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
        let ndim = reader.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(reader.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = reader.take(len * 4)?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Integrity(format!("bad tensor shape for '{name}': {e}")))?;
        tensors.push((name, tensor));
    }
    if reader.at != body.len() {
        return Err(Error::Integrity("trailing bytes in container".into()));
    }
    Ok(TensorFile {
        version,
        meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    const MAGIC: &[u8; 4] = b"TEST";

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tensors = vec![
            ("a.weight".to_string(), arr2(&[[1.0f32, -2.5], [0.0, 3.25]]).into_dyn()),
            ("a.bias".to_string(), ndarray::arr1(&[0.5f32]).into_dyn()),
        ];
        let meta = serde_json::json!({"kind": "test", "seed": 7});
        write_tensors(&path, MAGIC, &meta, &tensors).unwrap();
        let file = read_tensors(&path, MAGIC).unwrap();
        assert_eq!(file.meta["seed"], 7);
        assert_eq!(file.tensors.len(), 2);
        assert_eq!(file.tensors[0].0, "a.weight");
        assert_eq!(file.tensor("a.weight").unwrap(), &tensors[0].1);
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let tensors = vec![("x".to_string(), ndarray::arr1(&[1.0f32; 64]).into_dyn())];
        write_tensors(&path, MAGIC, &serde_json::json!({}), &tensors).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_tensors(&path, MAGIC),
            Err(Error::Integrity(_))
        ));

        let mut corrupt = bytes.clone();
        corrupt[40] ^= 0xff;
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            read_tensors(&path, MAGIC),
            Err(Error::Integrity(_))
        ));

        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensors(&path, b"OTHR").is_err());
    }
}
