//! Single-file tensor archive used for model checkpoints and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CYCADAAR"
//! version  u32
//! header   u64 length + UTF-8 text (TOML)
//! count    u32
//! tensor*  u32 name length, name, u32 rank, u64 dims[rank], f32 values
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchitectureSpec, ModelHandle};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CYCADAAR";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub header: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorArchive {
    pub fn new(header: impl Into<String>) -> Self {
        Self { header: header.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        self.tensors.push((name.into(), t.dims().to_vec(), values));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let (_, dims, values) = self
            .tensors
            .iter()
            .find(|(n, ..)| n == name)
            .ok_or_else(|| Error::Integrity(format!("archive has no tensor `{name}`")))?;
        Ok(Tensor::from_vec(values.clone(), dims.as_slice(), &Device::Cpu)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, dims, values) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
            return Err(Error::Integrity(format!("archive truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a tensor archive (bad magic)".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Integrity("archive checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut cur = Cursor { buf: body, pos: MAGIC.len() };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported archive version {version}")));
        }
        let header_len = cur.u64()? as usize;
        let header = String::from_utf8(cur.take(header_len)?.to_vec())
            .map_err(|_| Error::Integrity("archive header is not UTF-8".into()))?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Integrity(format!("tensor `{name}` dimensions overflow")))?;
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, dims, values));
        }
        if cur.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensors".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("archive ends mid-record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    frozen: bool,
    spec: ArchitectureSpec,
}

const CHECKPOINT_FORMAT: &str = "cycada-checkpoint/1";

/// Writes architecture and parameters (as f32) to a single archive.
pub fn save_checkpoint(handle: &ModelHandle, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        frozen: handle.is_frozen(),
        spec: handle.spec().clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Integrity(format!("cannot encode spec: {e}")))?;
    let mut archive = TensorArchive::new(text);
    for (name, var) in handle.parameters() {
        archive.push(name, var.as_tensor())?;
    }
    archive.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelHandle> {
    let archive = TensorArchive::read(path)?;
    let header: CheckpointHeader = toml::from_str(&archive.header)
        .map_err(|e| Error::Integrity(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Integrity(format!("{}: unsupported checkpoint format `{}`", path.display(), header.format)));
    }
    let named = archive
        .tensors
        .iter()
        .map(|(n, dims, v)| Ok((n.clone(), Tensor::from_vec(v.clone(), dims.as_slice(), &Device::Cpu)?)))
        .collect::<Result<Vec<_>>>()?;
    ModelHandle::from_parts(header.spec, named, header.frozen)
}
