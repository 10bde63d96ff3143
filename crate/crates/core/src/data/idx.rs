//! IDX containers: `00 00 08 <rank>` magic, big-endian u32 dimensions, u8 payload.
//!
//! Rank 1 holds labels, rank 3 holds `(N, H, W)` images or dense label maps,
//! rank 4 holds `(N, C, H, W)` multi-channel images. Files ending in `.gz`
//! are transparently (de)compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, IdxError, Result};

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} describe {expected} bytes, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let rank = self.dims.len();
        if !matches!(rank, 1 | 3 | 4) {
            return Err(Error::InvalidArgument(format!("IDX rank {rank} is not supported")));
        }
        let mut out = Vec::with_capacity(4 + 4 * rank + self.data.len());
        out.extend_from_slice(&[0, 0, UBYTE, rank as u8]);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, IdxError> {
        if bytes.len() < 4 {
            return Err(IdxError::Truncated { expected: 4, found: bytes.len() });
        }
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
            return Err(IdxError::BadMagic(magic));
        }
        let rank = bytes[3];
        if !matches!(rank, 1 | 3 | 4) {
            return Err(IdxError::UnsupportedRank(rank));
        }
        let header = 4 + 4 * rank as usize;
        if bytes.len() < header {
            return Err(IdxError::Truncated { expected: header, found: bytes.len() });
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let expected = dims.iter().product::<usize>();
        let found = bytes.len() - header;
        if found < expected {
            return Err(IdxError::Truncated { expected, found });
        }
        if found > expected {
            return Err(IdxError::DimMismatch { expected, found });
        }
        Ok(Self { dims, data: bytes[header..].to_vec() })
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bytes = if is_gzip(path) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Integrity(format!("{}: gzip: {e}", path.display())))?;
        out
    } else {
        raw
    };
    IdxTensor::decode(&bytes).map_err(|source| Error::Idx { path: path.to_path_buf(), source })
}

pub fn save_idx(tensor: &IdxTensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = tensor.encode()?;
    if is_gzip(path) {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_big_endian() {
        let t = IdxTensor::new(vec![2, 1, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3]);
        assert_eq!(IdxTensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn distinct_integrity_errors() {
        let t = IdxTensor::new(vec![4], vec![9, 8, 7, 6]).unwrap();
        let bytes = t.encode().unwrap();
        let mut rank2 = bytes.clone();
        rank2[3] = 2;
        assert_eq!(IdxTensor::decode(&rank2), Err(IdxError::UnsupportedRank(2)));
        let mut float = bytes.clone();
        float[2] = 0x0D;
        assert_eq!(IdxTensor::decode(&float), Err(IdxError::BadMagic(0x00000D01)));
        assert_eq!(IdxTensor::decode(&bytes[..6]), Err(IdxError::Truncated { expected: 8, found: 6 }));
        assert_eq!(IdxTensor::decode(&bytes[..10]), Err(IdxError::Truncated { expected: 4, found: 2 }));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(IdxTensor::decode(&long), Err(IdxError::DimMismatch { expected: 4, found: 5 }));
    }
}
