//! Datasets: canonical u8 storage, IDX persistence, digit preparation and
//! synthetic toy domains.
//!
//! Images are stored as unsigned bytes and mapped to `[-1, 1]` with the exact
//! affine map `v -> (2v - 255) / 255` when batched into tensors.

mod batch;
mod digits;
mod idx;
mod mat;
mod toy;

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use batch::{batch_iterator, epoch_order, paired_batches, Batch};
pub use digits::{
    luminance, prepare_digits, read_mnist, read_svhn, read_usps, resize_bilinear, to_grayscale, DigitShift,
    PreparedDomain, PreparedShift,
};
pub use idx::{load_idx, save_idx, IdxTensor};
pub use mat::{read_mat, MatArray, MatData};
pub use toy::{apply_shift, make_toy_pair, ToyDomainSpec, ToyPair, ToyShift, ToyTask};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Sidecar metadata written next to every stored dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub name: String,
    pub split: Split,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub classes: usize,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    /// One class index per image.
    Class(Vec<u8>),
    /// One class index per pixel, `N * H * W` entries.
    Dense(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<u8>,
    pub labels: Labels,
}

static NORMALIZE: std::sync::LazyLock<[f32; 256]> = std::sync::LazyLock::new(|| {
    let mut lut = [0f32; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = ((2 * v as i32 - 255) as f64 / 255.0) as f32;
    }
    lut
});

/// `v / 127.5 - 1`, computed so that `normalize(255 - v) == -normalize(v)` exactly.
pub fn normalize(v: u8) -> f32 {
    NORMALIZE[v as usize]
}

pub fn denormalize(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: [usize; 3],
        num_classes: usize,
        images: Vec<u8>,
        labels: Labels,
    ) -> Result<Self> {
        let ds = Self { name: name.into(), split, shape, num_classes, images, labels };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let per = self.image_len();
        if per == 0 || self.images.len() % per != 0 {
            return Err(Error::Data(format!("{}: image payload not a multiple of {per}", self.name)));
        }
        let n = self.images.len() / per;
        let (count, values) = match &self.labels {
            Labels::Class(l) => (l.len(), l),
            Labels::Dense(l) => (l.len() / (self.shape[1] * self.shape[2]).max(1), l),
        };
        if count != n {
            return Err(Error::Data(format!("{}: {n} images but {count} labels", self.name)));
        }
        if let Some(bad) = values.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::Data(format!("{}: label {bad} >= {} classes", self.name, self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.labels, Labels::Dense(_))
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Normalized `(B, C, H, W)` f32 batch.
    pub fn images_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            v.extend(self.image(i).iter().map(|&p| normalize(p)));
        }
        let [c, h, w] = self.shape;
        Ok(Tensor::from_vec(v, (indices.len(), c, h, w), &Device::Cpu)?)
    }

    /// `(B,)` or `(B, H, W)` u32 labels.
    pub fn labels_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        match &self.labels {
            Labels::Class(l) => {
                let v: Vec<u32> = indices.iter().map(|&i| l[i] as u32).collect();
                Ok(Tensor::from_vec(v, indices.len(), &Device::Cpu)?)
            }
            Labels::Dense(l) => {
                let hw = self.shape[1] * self.shape[2];
                let mut v = Vec::with_capacity(indices.len() * hw);
                for &i in indices {
                    v.extend(l[i * hw..(i + 1) * hw].iter().map(|&x| x as u32));
                }
                Ok(Tensor::from_vec(v, (indices.len(), self.shape[1], self.shape[2]), &Device::Cpu)?)
            }
        }
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let labels = match &self.labels {
            Labels::Class(l) => Labels::Class(l[..n].to_vec()),
            Labels::Dense(l) => Labels::Dense(l[..n * self.shape[1] * self.shape[2]].to_vec()),
        };
        Dataset::new(self.name.clone(), self.split, self.shape, self.num_classes, self.images[..n * self.image_len()].to_vec(), labels)
    }

    /// Replaces the images with those produced by `images` (same shape), keeping labels.
    pub fn with_images(&self, name: impl Into<String>, images: Vec<u8>) -> Result<Self> {
        Dataset::new(name, self.split, self.shape, self.num_classes, images, self.labels.clone())
    }

    /// SHA-256 over shape, image payload and label payload.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for d in self.shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        h.update(&self.images);
        match &self.labels {
            Labels::Class(l) => {
                h.update(b"class");
                h.update(l);
            }
            Labels::Dense(l) => {
                h.update(b"dense");
                h.update(l);
            }
        }
        hex::encode(h.finalize())
    }

    pub fn descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor {
            name: self.name.clone(),
            split: self.split,
            shape: self.shape,
            classes: self.num_classes,
            count: self.len(),
            sha256: self.content_hash(),
        }
    }

    /// Writes `{split}-images.idx`, `{split}-labels.idx` and `{split}.toml` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetDescriptor> {
        fs::create_dir_all(dir)?;
        let split = self.split.as_str();
        let [c, h, w] = self.shape;
        let n = self.len();
        let image_dims = if c == 1 { vec![n, h, w] } else { vec![n, c, h, w] };
        save_idx(&IdxTensor::new(image_dims, self.images.clone())?, &dir.join(format!("{split}-images.idx")))?;
        let labels = match &self.labels {
            Labels::Class(l) => IdxTensor::new(vec![n], l.clone())?,
            Labels::Dense(l) => IdxTensor::new(vec![n, h, w], l.clone())?,
        };
        save_idx(&labels, &dir.join(format!("{split}-labels.idx")))?;
        let desc = self.descriptor();
        let text = toml::to_string(&desc).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(dir.join(format!("{split}.toml")), text)?;
        Ok(desc)
    }

    /// Loads a stored split and verifies it against its sidecar descriptor.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let s = split.as_str();
        let sidecar = dir.join(format!("{s}.toml"));
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))?;
        let desc: DatasetDescriptor =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))?;
        let images = load_idx(&dir.join(format!("{s}-images.idx")))?;
        let labels = load_idx(&dir.join(format!("{s}-labels.idx")))?;
        let [c, h, w] = desc.shape;
        let expected_images = if c == 1 { vec![desc.count, h, w] } else { vec![desc.count, c, h, w] };
        if images.dims != expected_images {
            return Err(Error::Integrity(format!("{}: image dims {:?} != {expected_images:?}", dir.display(), images.dims)));
        }
        let labels = match labels.dims.len() {
            1 => Labels::Class(labels.data),
            _ => Labels::Dense(labels.data),
        };
        let ds = Dataset::new(desc.name.clone(), split, desc.shape, desc.classes, images.data, labels)?;
        let hash = ds.content_hash();
        if hash != desc.sha256 {
            return Err(Error::Integrity(format!("{}: content hash {hash} != recorded {}", dir.display(), desc.sha256)));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_is_exact_affine() {
        for v in 0..=255u8 {
            let x = normalize(v);
            assert!((x as f64 - (v as f64 / 127.5 - 1.0)).abs() < 1e-6);
            assert_eq!(normalize(255 - v), -x);
            assert_eq!(denormalize(x), v);
        }
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
    }

    #[test]
    fn save_load_verifies_hash() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new("d", Split::Train, [1, 2, 2], 3, vec![0, 1, 2, 3, 4, 5, 6, 7], Labels::Class(vec![0, 2]))
            .unwrap();
        let desc = ds.save(dir.path()).unwrap();
        assert_eq!(desc.count, 2);
        assert_eq!(Dataset::load(dir.path(), Split::Train).unwrap(), ds);
        let path = dir.path().join("train-images.idx");
        let mut bytes = fs::read(&path).unwrap();
        *bytes.last_mut().unwrap() ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path(), Split::Train), Err(Error::Integrity(_))));
    }

    #[test]
    fn rejects_inconsistent_payloads() {
        assert!(Dataset::new("d", Split::Train, [1, 2, 2], 2, vec![0; 8], Labels::Class(vec![0])).is_err());
        assert!(Dataset::new("d", Split::Train, [1, 2, 2], 2, vec![0; 4], Labels::Class(vec![5])).is_err());
    }
}
