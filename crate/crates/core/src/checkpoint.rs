//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `KERN`, `u32` version, `u32` tensor count;
//! per tensor `u32` name length, UTF-8 name, `u8` dtype (0 f32, 1 f64,
//! 2 i64), `u8` rank, `u64` dims, row-major payload; then a `u64` length
//! and a UTF-8 JSON snapshot.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"KERN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl TensorData {
    pub fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64 { .. } => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
            TensorData::I64 { shape, .. } => shape,
        }
    }

    fn element_size(&self) -> usize {
        match self {
            TensorData::F32(_) => 4,
            _ => 8,
        }
    }

    /// Serialized size of this entry under `name`.
    pub fn encoded_len(&self, name: &str) -> usize {
        let numel: usize = self.shape().iter().product();
        4 + name.len() + 1 + 1 + 8 * self.shape().len() + numel * self.element_size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, TensorData)>,
    pub snapshot: serde_json::Value,
}

impl Checkpoint {
    pub fn new(snapshot: serde_json::Value) -> Self {
        Checkpoint {
            tensors: Vec::new(),
            snapshot,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: TensorData) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(TensorData::F32(t)) => Ok(t),
            Some(_) => Err(Error::format("checkpoint", format!("tensor {name} is not f32"))),
            None => Err(Error::format("checkpoint", format!("tensor {name} missing"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::I64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let json = serde_json::to_vec(&self.snapshot).expect("json value serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(4)? != MAGIC {
            return Err(Error::format(source, "bad magic; not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_owned();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.error("dimension overflows"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error("tensor size overflows"))?;
            let data = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.error("tensor size overflows"))?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    TensorData::F32(Tensor::new(shape, v)?)
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.error("tensor size overflows"))?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    TensorData::F64(Tensor::new(shape, v)?)
                }
                2 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.error("tensor size overflows"))?)?;
                    let data = raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    TensorData::I64 { shape, data }
                }
                other => return Err(r.error(&format!("unknown dtype {other} for tensor {name}"))),
            };
            tensors.push((name, data));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| r.error("snapshot length overflows"))?;
        let snapshot = serde_json::from_slice(r.take(len)?).map_err(|e| r.error(&format!("snapshot: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after snapshot"));
        }
        Ok(Checkpoint { tensors, snapshot })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, reason: &str) -> Error {
        Error::format(format!("{} byte {}", self.source, self.pos), reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Replaces `path` with `bytes` through a temporary file in the same
/// directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    // Temporary files are created owner-only; outputs get ordinary permissions.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(tmp.path(), e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
