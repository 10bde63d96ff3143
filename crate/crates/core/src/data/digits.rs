//! Digit benchmark ingestion (MNIST, USPS, SVHN) and shift preparation.
//!
//! Raw archives are fetched by the operator beforehand and laid out as
//!
//! ```text
//! <raw>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! <raw>/usps/usps[.bz2|.gz], <raw>/usps/usps.t[.bz2|.gz]   (libsvm text, 7291 / 2007 rows)
//! <raw>/svhn/{train,test}_32x32.mat
//! <raw>/SHA256SUMS                                          (optional, `sha256sum` format)
//! ```
//!
//! Resampling is bilinear with half-pixel centres (`src = (dst + 0.5) * in / out - 0.5`,
//! clamped at the borders), evaluated in f64 on byte values and rounded half-up.
//! Grayscale conversion uses `Y = 0.299 R + 0.587 G + 0.114 B`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_idx, read_mat, Dataset, DatasetDescriptor, Labels, MatData, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DigitShift {
    MnistUsps,
    UspsMnist,
    SvhnMnist,
}

impl DigitShift {
    pub fn name(self) -> &'static str {
        match self {
            DigitShift::MnistUsps => "mnist-usps",
            DigitShift::UspsMnist => "usps-mnist",
            DigitShift::SvhnMnist => "svhn-mnist",
        }
    }

    /// Output directory names of (source, target).
    pub fn domains(self) -> (&'static str, &'static str) {
        match self {
            DigitShift::MnistUsps => ("mnist28", "usps28"),
            DigitShift::UspsMnist => ("usps28", "mnist28"),
            DigitShift::SvhnMnist => ("svhn32gray", "mnist32"),
        }
    }
}

impl std::str::FromStr for DigitShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist-usps" => Ok(DigitShift::MnistUsps),
            "usps-mnist" => Ok(DigitShift::UspsMnist),
            "svhn-mnist" => Ok(DigitShift::SvhnMnist),
            other => Err(Error::Config(format!("unknown digit shift `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedDomain {
    pub dir: PathBuf,
    pub train: DatasetDescriptor,
    pub test: DatasetDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedShift {
    pub shift: DigitShift,
    pub source: PreparedDomain,
    pub target: PreparedDomain,
}

/// ITU-R BT.601 luma of an RGB triple given on a `[0, 1]` scale.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Planar `(3, H, W)` bytes to `(1, H, W)` luma bytes.
pub fn to_grayscale(rgb: &[u8], h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    (0..plane)
        .map(|i| {
            let y = luminance(rgb[i] as f64, rgb[plane + i] as f64, rgb[2 * plane + i] as f64);
            (y + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of planar `(C, H, W)` bytes to `(C, out_h, out_w)`.
pub fn resize_bilinear(img: &[u8], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &img[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let at = |y: usize, x: usize| p[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - lx) + at(y0, x1) * lx;
                let bottom = at(y1, x0) * (1.0 - lx) + at(y1, x1) * lx;
                let v = top * (1.0 - ly) + bottom * ly;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn resized(ds: &Dataset, name: &str, size: usize) -> Result<Dataset> {
    let [c, h, w] = ds.shape;
    let mut images = Vec::with_capacity(ds.len() * c * size * size);
    for i in 0..ds.len() {
        images.extend(resize_bilinear(ds.image(i), c, h, w, size, size));
    }
    Dataset::new(name, ds.split, [c, size, size], ds.num_classes, images, ds.labels.clone())
}

/// First existing path among `base` and `base` with a compression suffix.
fn locate(base: &Path) -> Result<PathBuf> {
    let mut candidates = vec![base.to_path_buf()];
    for ext in ["gz", "bz2"] {
        let mut s = base.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        candidates.push(PathBuf::from(s));
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Data(format!("raw archive {} not found (fetch it first)", base.display())))
}

fn read_decompressed(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let result = match path.extension().and_then(|e| e.to_str()) {
        Some("gz") => flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out),
        Some("bz2") => bzip2::read::BzDecoder::new(raw.as_slice()).read_to_end(&mut out),
        _ => return Ok(raw),
    };
    result.map_err(|e| Error::Integrity(format!("{}: decompression failed: {e}", path.display())))?;
    Ok(out)
}

/// MNIST split from `dir` (IDX files, optionally gzipped).
pub fn read_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = load_idx(&locate(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = load_idx(&locate(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(Error::Data(format!("MNIST dims {:?} / {:?} inconsistent", images.dims, labels.dims)));
    }
    let shape = [1, images.dims[1], images.dims[2]];
    Dataset::new("mnist", split, shape, 10, images.data, Labels::Class(labels.data))
}

/// USPS in libsvm text form: `label idx:value ...`, labels 1..=10, values in `[-1, 1]`,
/// 256 features per row. Absent features read as 0.
pub fn read_usps(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read_decompressed(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fail = |what: &str| Error::Data(format!("{}:{}: {what}", path.display(), lineno + 1));
        let mut fields = line.split_whitespace();
        let label: f64 = fields.next().and_then(|l| l.parse().ok()).ok_or_else(|| fail("bad label"))?;
        if !(1.0..=10.0).contains(&label) || label.fract() != 0.0 {
            return Err(fail("label outside 1..=10"));
        }
        let mut row = [0f64; 256];
        for f in fields {
            let (idx, val) = f.split_once(':').ok_or_else(|| fail("bad feature"))?;
            let idx: usize = idx.parse().map_err(|_| fail("bad feature index"))?;
            let val: f64 = val.parse().map_err(|_| fail("bad feature value"))?;
            if !(1..=256).contains(&idx) {
                return Err(fail("feature index outside 1..=256"));
            }
            row[idx - 1] = val;
        }
        images.extend(row.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor() as u8));
        labels.push(label as u8 - 1);
    }
    Dataset::new("usps", split, [1, 16, 16], 10, images, Labels::Class(labels))
}

/// SVHN cropped digits from a `{X: (32,32,3,N) uint8, y: (N,1)}` MAT file.
/// Label 10 denotes the digit 0. Returns planar RGB `(3, 32, 32)` images.
pub fn read_svhn(path: &Path, split: Split) -> Result<Dataset> {
    let arrays = read_mat(path)?;
    let find = |name: &str| {
        arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Data(format!("{}: missing variable `{name}`", path.display())))
    };
    let x = find("X")?;
    let y = find("y")?;
    if x.dims.len() != 4 || x.dims[2] != 3 {
        return Err(Error::Data(format!("{}: X has dims {:?}, expected (H, W, 3, N)", path.display(), x.dims)));
    }
    let (h, w, n) = (x.dims[0], x.dims[1], x.dims[3]);
    if y.data.len() != n {
        return Err(Error::Data(format!("{}: {n} images but {} labels", path.display(), y.data.len())));
    }
    let MatData::U8(xs) = &x.data else {
        return Err(Error::Data(format!("{}: X must be uint8", path.display())));
    };
    let mut images = Vec::with_capacity(n * 3 * h * w);
    for i in 0..n {
        for ch in 0..3 {
            for r in 0..h {
                for col in 0..w {
                    images.push(xs[x.offset(&[r, col, ch, i])]);
                }
            }
        }
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let v = y.data.get_f64(i);
        if !(1.0..=10.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Data(format!("{}: label {v} outside 1..=10", path.display())));
        }
        labels.push((v as u8) % 10);
    }
    Dataset::new("svhn", split, [3, h, w], 10, images, Labels::Class(labels))
}

/// Parsed `sha256sum`-style manifest: relative path -> lowercase hex digest.
fn read_checksums(raw: &Path) -> Result<Option<BTreeMap<PathBuf, String>>> {
    let path = raw.join("SHA256SUMS");
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut sums = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (digest, file) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Data(format!("{}: malformed line `{line}`", path.display())))?;
        let file = file.trim().trim_start_matches('*');
        sums.insert(PathBuf::from(file), digest.to_ascii_lowercase());
    }
    Ok(Some(sums))
}

fn verify(raw: &Path, file: &Path, sums: &Option<BTreeMap<PathBuf, String>>) -> Result<()> {
    let Some(sums) = sums else {
        log::warn!("no SHA256SUMS under {}; {} is unverified", raw.display(), file.display());
        return Ok(());
    };
    let rel = file.strip_prefix(raw).unwrap_or(file);
    let expected = sums
        .get(rel)
        .ok_or_else(|| Error::Integrity(format!("{} is not listed in SHA256SUMS", rel.display())))?;
    let actual = hex::encode(Sha256::digest(fs::read(file)?));
    if &actual != expected {
        return Err(Error::Integrity(format!("checksum mismatch for {}: {actual} != {expected}", rel.display())));
    }
    Ok(())
}

fn load_domain(raw: &Path, name: &str, sums: &Option<BTreeMap<PathBuf, String>>) -> Result<(Dataset, Dataset)> {
    let pair = match name {
        "mnist28" | "mnist32" => {
            let dir = raw.join("mnist");
            for stem in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
                verify(raw, &locate(&dir.join(stem))?, sums)?;
            }
            (read_mnist(&dir, Split::Train)?, read_mnist(&dir, Split::Test)?)
        }
        "usps28" => {
            let train = locate(&raw.join("usps").join("usps"))?;
            let test = locate(&raw.join("usps").join("usps.t"))?;
            verify(raw, &train, sums)?;
            verify(raw, &test, sums)?;
            (read_usps(&train, Split::Train)?, read_usps(&test, Split::Test)?)
        }
        _ => {
            let train = raw.join("svhn").join("train_32x32.mat");
            let test = raw.join("svhn").join("test_32x32.mat");
            for p in [&train, &test] {
                if !p.is_file() {
                    return Err(Error::Data(format!("raw archive {} not found (fetch it first)", p.display())));
                }
                verify(raw, p, sums)?;
            }
            (read_svhn(&train, Split::Train)?, read_svhn(&test, Split::Test)?)
        }
    };
    let convert = |ds: Dataset| -> Result<Dataset> {
        match name {
            "mnist28" => Dataset::new(name, ds.split, ds.shape, 10, ds.images, ds.labels),
            "mnist32" => resized(&ds, name, 32),
            "usps28" => resized(&ds, name, 28),
            _ => {
                let [_, h, w] = ds.shape;
                let mut images = Vec::with_capacity(ds.len() * h * w);
                for i in 0..ds.len() {
                    images.extend(to_grayscale(ds.image(i), h, w));
                }
                Dataset::new(name, ds.split, [1, h, w], 10, images, ds.labels)
            }
        }
    };
    Ok((convert(pair.0)?, convert(pair.1)?))
}

fn prepare_domain(raw: &Path, out: &Path, name: &str, sums: &Option<BTreeMap<PathBuf, String>>) -> Result<PreparedDomain> {
    let (train, test) = load_domain(raw, name, sums)?;
    let dir = out.join(name);
    let train = train.save(&dir)?;
    let test = test.save(&dir)?;
    Ok(PreparedDomain { dir, train, test })
}

/// Converts raw archives into canonical IDX splits for both sides of `shift`.
pub fn prepare_digits(raw: &Path, out: &Path, shift: DigitShift) -> Result<PreparedShift> {
    let sums = read_checksums(raw)?;
    let (s, t) = shift.domains();
    let source = prepare_domain(raw, out, s, &sums)?;
    let target = prepare_domain(raw, out, t, &sums)?;
    Ok(PreparedShift { shift, source, target })
}
