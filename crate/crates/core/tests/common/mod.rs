//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cycada::config::{load_config, ExperimentConfig};
use cycada::data::{save_idx, IdxTensor};
use cycada::losses::{Classifier, Critic, DiscriminatorOutput};
use cycada::Result;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn preset(rel: &str) -> PathBuf {
    crate_dir().join("configs").join(rel)
}

pub fn load_preset(rel: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    load_config(Some(&preset(rel)), &overrides).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// `x -> flatten(x) · W`; the weights may be a tracked variable.
pub struct Linear {
    pub w: Tensor,
    pub frozen: bool,
}

impl Classifier for Linear {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let w = if self.frozen { self.w.detach() } else { self.w.clone() };
        Ok(images.flatten_from(1)?.matmul(&w)?)
    }
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.logits(images)
    }
    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// `sigmoid(features · v + c)` read as probabilities.
pub struct Logistic {
    pub v: Tensor,
    pub c: f64,
}

impl Critic for Logistic {
    fn judge(&self, inputs: &Tensor) -> Result<DiscriminatorOutput> {
        let z = inputs.matmul(&self.v)?.squeeze(1)?.affine(1.0, self.c)?;
        let p = z.neg()?.exp()?.affine(1.0, 1.0)?.recip()?;
        Ok(DiscriminatorOutput::probabilities(p))
    }
}

fn gzip(path: &Path, bytes: &[u8]) {
    let mut enc = flate2::write::GzEncoder::new(fs::File::create(path).unwrap(), flate2::Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

fn bzip(path: &Path, bytes: &[u8]) {
    let mut enc = bzip2::write::BzEncoder::new(fs::File::create(path).unwrap(), bzip2::Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap();
}

/// Writes tiny stand-ins for the MNIST, USPS and SVHN archives under `raw`,
/// laid out the way `prepare-data --raw` expects them.
pub fn write_raw_archives(raw: &Path, seed: u64) {
    let mut r = rng(seed);
    let mnist = raw.join("mnist");
    fs::create_dir_all(&mnist).unwrap();
    for (prefix, n) in [("train", 30usize), ("t10k", 12)] {
        let images: Vec<u8> = (0..n * 28 * 28).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let tmp = raw.join("tmp.idx");
        save_idx(&IdxTensor::new(vec![n, 28, 28], images).unwrap(), &tmp).unwrap();
        gzip(&mnist.join(format!("{prefix}-images-idx3-ubyte.gz")), &fs::read(&tmp).unwrap());
        save_idx(&IdxTensor::new(vec![n], labels).unwrap(), &tmp).unwrap();
        gzip(&mnist.join(format!("{prefix}-labels-idx1-ubyte.gz")), &fs::read(&tmp).unwrap());
        fs::remove_file(&tmp).unwrap();
    }
    let usps = raw.join("usps");
    fs::create_dir_all(&usps).unwrap();
    for (name, n) in [("usps.bz2", 20usize), ("usps.t.bz2", 10)] {
        let mut text = String::new();
        for i in 0..n {
            text += &format!("{}", i % 10 + 1);
            for f in 1..=256 {
                let v: f64 = r.random_range(-1.0..1.0);
                text += &format!(" {f}:{v:.6}");
            }
            text += "\n";
        }
        bzip(&usps.join(name), text.as_bytes());
    }
    let svhn = raw.join("svhn");
    fs::create_dir_all(&svhn).unwrap();
    let fixture = crate_dir().join("tests/fixtures/svhn_tiny.mat");
    fs::copy(&fixture, svhn.join("train_32x32.mat")).unwrap();
    fs::copy(&fixture, svhn.join("test_32x32.mat")).unwrap();
}
