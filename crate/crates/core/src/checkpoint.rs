//! Binary parameter archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"ADPSARCH"
//! version    u32       1
//! header_len u64       length of the JSON header in bytes
//! header     UTF-8 JSON (configuration, provenance)
//! count      u64       number of tensors
//! tensor*    name_len u32, name bytes (UTF-8),
//!            ndim u32, dims u64 × ndim,
//!            values f64 × Π dims
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Param;

const MAGIC: &[u8; 8] = b"ADPSARCH";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_param(name: &str, p: &Param) -> Self {
        Self {
            name: name.to_string(),
            shape: p.shape.clone(),
            data: p.value.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated archive: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated archive: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    // guard against absurd lengths from corrupt files before allocating
    if len > (1 << 34) {
        return Err(corrupt(format!("implausible field length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| corrupt(format!("truncated archive: {e}")))?;
    Ok(buf)
}

impl Archive {
    pub fn new(header: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        Self { header, tensors }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, NamedTensor> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.clone()))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| corrupt(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file too short to be an archive"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported archive version {version}")));
        }
        let hlen = read_u64(r)?;
        let header = serde_json::from_slice(&read_bytes(r, hlen)?)
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = read_u32(r)?;
            let name = String::from_utf8(read_bytes(r, nlen as u64)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let ndim = read_u32(r)?;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = read_bytes(r, (len * 8) as u64)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| corrupt(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let a = Archive::new(
            serde_json::json!({"kind": "test", "n": 3}),
            vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300],
                },
                NamedTensor {
                    name: "scalar".into(),
                    shape: vec![],
                    data: vec![42.0],
                },
            ],
        );
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Archive::read_from(&mut buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Archive::read_from(&mut &b"not an archive"[..]),
            Err(Error::Checkpoint(_))
        ));
        let mut buf = Vec::new();
        Archive::new(serde_json::json!({}), vec![]).write_to(&mut buf).unwrap();
        buf[8] = 9;
        assert!(Archive::read_from(&mut buf.as_slice()).is_err());
    }
}
