//! Minimal reader for level-5 MAT files (little-endian), enough for numeric
//! arrays such as the SVHN cropped-digit archives.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::ZlibDecoder;

use crate::error::{Error, Result};

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// Numeric payload in column-major order. `u8` arrays are kept as bytes,
/// every other numeric class is widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl MatData {
    pub fn len(&self) -> usize {
        match self {
            MatData::U8(v) => v.len(),
            MatData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            MatData::U8(v) => v[i] as f64,
            MatData::F64(v) => v[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: MatData,
}

impl MatArray {
    /// Column-major linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        let mut off = 0;
        let mut stride = 1;
        for (i, d) in index.iter().zip(&self.dims) {
            off += i * stride;
            stride *= d;
        }
        off
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Integrity(format!("MAT: {}", msg.into()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated element"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    /// Next `(type, payload)` element, honouring the small-element format and 8-byte padding.
    fn element(&mut self) -> Result<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            let n = (first >> 16) as usize;
            if n > 4 {
                return Err(bad("small element longer than 4 bytes"));
            }
            let payload = self.take(4)?;
            return Ok((first & 0xFFFF, &payload[..n]));
        }
        let n = self.u32()? as usize;
        let payload = self.take(n)?;
        if first != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            self.pos = (self.pos + pad).min(self.bytes.len());
        }
        Ok((first, payload))
    }
}

fn numeric(ty: u32, b: &[u8]) -> Result<MatData> {
    macro_rules! widen {
        ($t:ty, $n:expr) => {
            MatData::F64(b.chunks_exact($n).map(|c| <$t>::from_le_bytes(c.try_into().unwrap()) as f64).collect())
        };
    }
    Ok(match ty {
        MI_UINT8 => MatData::U8(b.to_vec()),
        MI_INT8 => MatData::F64(b.iter().map(|&v| v as i8 as f64).collect()),
        MI_INT16 => widen!(i16, 2),
        MI_UINT16 => widen!(u16, 2),
        MI_INT32 => widen!(i32, 4),
        MI_UINT32 => widen!(u32, 4),
        MI_SINGLE => widen!(f32, 4),
        MI_DOUBLE => widen!(f64, 8),
        MI_INT64 => widen!(i64, 8),
        MI_UINT64 => widen!(u64, 8),
        other => return Err(bad(format!("unsupported numeric element type {other}"))),
    })
}

/// Parses one miMATRIX body. Returns `None` for non-numeric classes (cells,
/// structs, chars, sparse), which are skipped.
fn matrix(body: &[u8]) -> Result<Option<MatArray>> {
    if body.is_empty() {
        return Ok(None);
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    let (_, flags) = c.element()?;
    if flags.len() < 4 {
        return Err(bad("array flags too short"));
    }
    let flags = u32::from_le_bytes([flags[0], flags[1], flags[2], flags[3]]);
    let class = flags & 0xFF;
    if !(6..=15).contains(&class) || flags & 0x0800 != 0 {
        return Ok(None);
    }
    let (dim_ty, dims) = c.element()?;
    if dim_ty != MI_INT32 {
        return Err(bad("dimensions must be int32"));
    }
    let dims: Vec<usize> = dims.chunks_exact(4).map(|d| i32::from_le_bytes(d.try_into().unwrap()).max(0) as usize).collect();
    let (_, name) = c.element()?;
    let name = String::from_utf8_lossy(name).into_owned();
    let (ty, payload) = c.element()?;
    let mut data = numeric(ty, payload)?;
    // uint8 classes may be stored with a narrower or wider element type
    if class == 9 {
        if let MatData::F64(v) = &data {
            data = MatData::U8(v.iter().map(|&x| x as u8).collect());
        }
    } else if let MatData::U8(v) = &data {
        data = MatData::F64(v.iter().map(|&x| x as f64).collect());
    }
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(bad(format!("{name}: {} values for dims {dims:?}", data.len())));
    }
    Ok(Some(MatArray { name, dims, data }))
}

pub fn parse_mat(bytes: &[u8]) -> Result<Vec<MatArray>> {
    if bytes.len() < 128 {
        return Err(bad("file shorter than the 128-byte header"));
    }
    if &bytes[126..128] != b"IM" {
        return Err(bad("only little-endian level-5 files are supported"));
    }
    let mut c = Cursor { bytes: &bytes[128..], pos: 0 };
    let mut out = Vec::new();
    while !c.done() {
        let (ty, payload) = c.element()?;
        match ty {
            MI_MATRIX => out.extend(matrix(payload)?),
            MI_COMPRESSED => {
                let mut raw = Vec::new();
                ZlibDecoder::new(payload).read_to_end(&mut raw).map_err(|e| bad(format!("zlib: {e}")))?;
                let mut inner = Cursor { bytes: &raw, pos: 0 };
                while !inner.done() {
                    let (ty, payload) = inner.element()?;
                    if ty == MI_MATRIX {
                        out.extend(matrix(payload)?);
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

pub fn read_mat(path: &Path) -> Result<Vec<MatArray>> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_mat(&bytes).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Vec<u8> {
        let mut h = vec![b' '; 116];
        h.extend([0u8; 8]);
        h.extend([0x00, 0x01]);
        h.extend(b"IM");
        h
    }

    fn element(ty: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = ty.to_le_bytes().to_vec();
        v.extend((payload.len() as u32).to_le_bytes());
        v.extend(payload);
        while v.len() % 8 != 0 {
            v.push(0);
        }
        v
    }

    #[test]
    fn hand_built_uint8_matrix() {
        let mut body = element(MI_UINT32, &[9, 0, 0, 0, 0, 0, 0, 0]);
        body.extend(element(MI_INT32, &[2, 0, 0, 0, 3, 0, 0, 0]));
        // small-element name "X"
        body.extend([1, 0, 1, 0, b'X', 0, 0, 0]);
        body.extend(element(MI_UINT8, &[1, 2, 3, 4, 5, 6]));
        let mut file = header();
        file.extend(element(MI_MATRIX, &body));
        let arrays = parse_mat(&file).unwrap();
        assert_eq!(arrays.len(), 1);
        let a = &arrays[0];
        assert_eq!(a.name, "X");
        assert_eq!(a.dims, vec![2, 3]);
        // column-major: (row 1, col 2) is the sixth stored value
        assert_eq!(a.data.get_f64(a.offset(&[1, 2])), 6.0);
        assert_eq!(a.data.get_f64(a.offset(&[0, 1])), 3.0);
    }

    #[test]
    fn rejects_big_endian_and_truncation() {
        let mut file = header();
        file[126..128].copy_from_slice(b"MI");
        assert!(parse_mat(&file).is_err());
        let mut file = header();
        file.extend([14, 0, 0, 0, 64, 0, 0, 0, 1]);
        assert!(parse_mat(&file).is_err());
    }
}
