//! Network architectures and parameter handles.
//!
//! A [`ModelHandle`] pairs a declarative [`ArchitectureSpec`] with named
//! parameters. The forward pass interprets the layer list, so every network
//! role (task net, generator, image and feature discriminators, toy
//! segmentation net) shares one execution path and one checkpoint format.

mod checkpoint;
mod spec;

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, TensorArchive};
pub use spec::{
    feature_discriminator_spec, generator_spec, image_discriminator_spec, task_net_spec, toy_seg_net_spec,
    ActShape, ArchitectureSpec, FeatureDiscriminatorOptions, FeatureLayer, GeneratorOptions,
    ImageDiscriminatorOptions, Init, Layer, Role, SegNetOptions, TaskNetOptions,
};

use crate::error::{Error, Result};
use crate::losses::{Classifier, Critic, DiscriminatorOutput, Translator};

const NORM_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout only fires in training mode and draws its
/// masks from the supplied generator, so passes are reproducible.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug)]
pub struct ModelHandle {
    spec: ArchitectureSpec,
    /// Parameters grouped by layer index.
    layer_params: Vec<Vec<(String, Var)>>,
    frozen: bool,
    dtype: DType,
}

impl ModelHandle {
    /// Builds and seeds a model from its architecture.
    pub fn from_spec(spec: ArchitectureSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut params = Vec::new();
            for (suffix, shape, fan_in, init, is_bias) in param_layout(layer) {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match (init, is_bias) {
                    (Init::Normal { .. }, true) => vec![0.0; n],
                    (Init::Normal { std }, false) => {
                        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    (Init::FanIn, _) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(DType::F32)?.to_dtype(dtype)?;
                params.push((format!("layers.{i}.{suffix}"), Var::from_tensor(&t)?));
            }
            layer_params.push(params);
        }
        Ok(Self { spec, layer_params, frozen: false, dtype })
    }

    pub(crate) fn from_parts(spec: ArchitectureSpec, mut named: Vec<(String, Tensor)>, frozen: bool) -> Result<Self> {
        spec.validate()?;
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut dtype = DType::F32;
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut params = Vec::new();
            for (suffix, shape, ..) in param_layout(layer) {
                let name = format!("layers.{i}.{suffix}");
                let pos = named
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
                let (_, t) = named.swap_remove(pos);
                if t.dims() != shape.as_slice() {
                    return Err(Error::Integrity(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.dims())));
                }
                dtype = t.dtype();
                params.push((name, Var::from_tensor(&t)?));
            }
            layer_params.push(params);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Integrity(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { spec, layer_params, frozen, dtype })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Independent copy of the parameters (no shared storage).
    pub fn duplicate(&self, frozen: bool) -> Result<Self> {
        let layer_params = self
            .layer_params
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|(n, v)| Ok((n.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: self.spec.clone(), layer_params, frozen, dtype: self.dtype })
    }

    /// Same parameters converted to another float type (used for f64 gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let named = self
            .parameters()
            .map(|(n, v)| Ok((n.to_string(), v.as_tensor().to_dtype(dtype)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(self.spec.clone(), named, self.frozen)
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.layer_params.iter().flatten().map(|(n, v)| (n.as_str(), v))
    }

    /// Parameters open for optimization; frozen handles refuse.
    pub fn trainable_parameters(&self) -> Result<Vec<(&str, &Var)>> {
        if self.frozen {
            return Err(Error::Frozen(format!("{:?}", self.spec.role)));
        }
        Ok(self.parameters().collect())
    }

    /// Overwrites one parameter in place.
    pub fn set_parameter(&self, name: &str, value: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("{:?}", self.spec.role)));
        }
        let (_, var) = self
            .parameters()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names, shapes and little-endian f32 values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.parameters() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Host copy of every parameter, for bitwise comparisons.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.parameters()
            .map(|(n, v)| Ok((n.to_string(), v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        let ok = match self.spec.role {
            Role::FeatureDiscriminator => x.rank() == 2 && x.dim(1)? == c,
            _ => x.rank() == 4 && x.dims()[1..] == [c, h, w],
        };
        if !ok {
            return Err(Error::Shape(format!(
                "{:?} expects input {:?} (after batch), got {:?}",
                self.spec.role,
                self.spec.input_shape,
                x.dims()
            )));
        }
        Ok(())
    }

    fn param(&self, layer: usize, idx: usize) -> Tensor {
        let t = self.layer_params[layer][idx].1.as_tensor();
        if self.frozen {
            t.detach()
        } else {
            t.clone()
        }
    }

    fn run(&self, x: &Tensor, end: usize, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.check_input(x)?;
        if self.spec.passthrough {
            return Ok(x.clone());
        }
        let mut h = x.clone();
        for (i, layer) in self.spec.layers[..end].iter().enumerate() {
            h = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let w = self.param(i, 0);
                    let b = self.param(i, 1);
                    h.conv2d(&w, padding, stride, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?
                }
                Layer::Deconv { stride, padding, output_padding, .. } => {
                    let w = self.param(i, 0);
                    let b = self.param(i, 1);
                    h.conv_transpose2d(&w, padding, output_padding, stride, 1)?
                        .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                }
                Layer::Linear { .. } => {
                    let w = self.param(i, 0);
                    let b = self.param(i, 1);
                    h.matmul(&w.t()?)?.broadcast_add(&b)?
                }
                Layer::MaxPool { size } => h.max_pool2d(size)?,
                Layer::Flatten => h.flatten_from(1)?,
                Layer::Dropout { p } => match mode {
                    Mode::Train(rng) if p > 0.0 => dropout(&h, p, &mut **rng)?,
                    _ => h,
                },
                Layer::InstanceNorm => instance_norm(&h)?,
                Layer::Relu => h.relu()?,
                Layer::LeakyRelu { slope } => h.maximum(&h.affine(slope, 0.0)?)?,
                Layer::Tanh => h.tanh()?,
                Layer::Residual { scale, .. } => {
                    let c1 = self.param(i, 0).clone();
                    let b1 = self.param(i, 1);
                    let c2 = self.param(i, 2);
                    let b2 = self.param(i, 3);
                    let r = h.conv2d(&c1, 1, 1, 1, 1)?.broadcast_add(&b1.reshape((1, (), 1, 1))?)?;
                    let r = instance_norm(&r)?.relu()?;
                    let r = r.conv2d(&c2, 1, 1, 1, 1)?.broadcast_add(&b2.reshape((1, (), 1, 1))?)?;
                    let r = instance_norm(&r)?;
                    (h + r.affine(scale, 0.0)?)?
                }
            };
        }
        Ok(h)
    }

    /// Full forward pass. Feature discriminators return `(B,)` scores.
    pub fn forward(&self, x: &Tensor, mut mode: Mode<'_>) -> Result<Tensor> {
        let out = self.run(x, self.spec.layers.len(), &mut mode)?;
        match self.spec.role {
            Role::FeatureDiscriminator => Ok(out.squeeze(1)?),
            _ => Ok(out),
        }
    }

    /// Flattened `(B, D)` output of the designated feature layer.
    pub fn features(&self, x: &Tensor, mut mode: Mode<'_>) -> Result<Tensor> {
        let tap = self
            .spec
            .feature_tap
            .ok_or_else(|| Error::InvalidArgument(format!("{:?} has no feature layer", self.spec.role)))?;
        Ok(self.run(x, tap + 1, &mut mode)?.flatten_from(1)?)
    }
}

/// `(name suffix, shape, fan_in, init, is_bias)` for every parameter of a layer.
fn param_layout(layer: &Layer) -> Vec<(&'static str, Vec<usize>, usize, Init, bool)> {
    match *layer {
        Layer::Conv { in_channels, out_channels, kernel, init, .. } => {
            let fan_in = in_channels * kernel * kernel;
            vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel], fan_in, init, false),
                ("bias", vec![out_channels], fan_in, init, true),
            ]
        }
        Layer::Deconv { in_channels, out_channels, kernel, init, .. } => {
            let fan_in = out_channels * kernel * kernel;
            vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel], fan_in, init, false),
                ("bias", vec![out_channels], fan_in, init, true),
            ]
        }
        Layer::Linear { in_features, out_features, init } => vec![
            ("weight", vec![out_features, in_features], in_features, init, false),
            ("bias", vec![out_features], in_features, init, true),
        ],
        Layer::Residual { channels, init, .. } => {
            let fan_in = channels * 9;
            vec![
                ("conv1.weight", vec![channels, channels, 3, 3], fan_in, init, false),
                ("conv1.bias", vec![channels], fan_in, init, true),
                ("conv2.weight", vec![channels, channels, 3, 3], fan_in, init, false),
                ("conv2.bias", vec![channels], fan_in, init, true),
            ]
        }
        _ => Vec::new(),
    }
}

fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&var.affine(1.0, NORM_EPS)?.sqrt()?)?)
}

fn dropout(x: &Tensor, p: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn build_task_net(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelHandle> {
    build_task_net_with(input_shape, num_classes, &TaskNetOptions::default(), seed)
}

pub fn build_task_net_with(
    input_shape: [usize; 3],
    num_classes: usize,
    opts: &TaskNetOptions,
    seed: u64,
) -> Result<ModelHandle> {
    ModelHandle::from_spec(task_net_spec(input_shape, num_classes, opts)?, seed, DType::F32)
}

pub fn build_generator(channels: usize, image_size: usize, seed: u64) -> Result<ModelHandle> {
    build_generator_with(channels, image_size, &GeneratorOptions::default(), seed)
}

pub fn build_generator_with(
    channels: usize,
    image_size: usize,
    opts: &GeneratorOptions,
    seed: u64,
) -> Result<ModelHandle> {
    ModelHandle::from_spec(generator_spec(channels, image_size, opts)?, seed, DType::F32)
}

/// Debug generator that passes its input through unchanged.
pub fn build_identity_generator(channels: usize, image_size: usize) -> Result<ModelHandle> {
    let mut spec = generator_spec(channels, image_size, &GeneratorOptions { base_filters: 1, residual_blocks: 0, outer_kernel: 7, downsample: 2 })?;
    spec.passthrough = true;
    for layer in spec.layers.iter_mut() {
        if let Layer::Residual { scale, .. } = layer {
            *scale = 0.0;
        }
    }
    ModelHandle::from_spec(spec, 0, DType::F32)
}

pub fn build_image_discriminator(channels: usize, image_size: usize, seed: u64) -> Result<ModelHandle> {
    build_image_discriminator_with(channels, image_size, &ImageDiscriminatorOptions::default(), seed)
}

pub fn build_image_discriminator_with(
    channels: usize,
    image_size: usize,
    opts: &ImageDiscriminatorOptions,
    seed: u64,
) -> Result<ModelHandle> {
    ModelHandle::from_spec(image_discriminator_spec(channels, image_size, opts)?, seed, DType::F32)
}

pub fn build_feature_discriminator(feature_dim: usize, seed: u64) -> Result<ModelHandle> {
    build_feature_discriminator_with(feature_dim, &FeatureDiscriminatorOptions::default(), seed)
}

pub fn build_feature_discriminator_with(
    feature_dim: usize,
    opts: &FeatureDiscriminatorOptions,
    seed: u64,
) -> Result<ModelHandle> {
    ModelHandle::from_spec(feature_discriminator_spec(feature_dim, opts)?, seed, DType::F32)
}

pub fn build_toy_seg_net(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelHandle> {
    build_toy_seg_net_with(input_shape, num_classes, &SegNetOptions::default(), seed)
}

pub fn build_toy_seg_net_with(
    input_shape: [usize; 3],
    num_classes: usize,
    opts: &SegNetOptions,
    seed: u64,
) -> Result<ModelHandle> {
    ModelHandle::from_spec(toy_seg_net_spec(input_shape, num_classes, opts)?, seed, DType::F32)
}

impl Translator for ModelHandle {
    fn translate(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, Mode::Eval)
    }
}

impl Classifier for ModelHandle {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, Mode::Eval)
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        ModelHandle::features(self, images, Mode::Eval)
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

impl Critic for ModelHandle {
    fn judge(&self, inputs: &Tensor) -> Result<DiscriminatorOutput> {
        Ok(DiscriminatorOutput::raw(self.forward(inputs, Mode::Eval)?))
    }
}

/// A classifier evaluated in training mode (dropout active).
pub struct Training<'a> {
    model: &'a ModelHandle,
    rng: RefCell<&'a mut ChaCha8Rng>,
}

impl<'a> Training<'a> {
    pub fn new(model: &'a ModelHandle, rng: &'a mut ChaCha8Rng) -> Self {
        Self { model, rng: RefCell::new(rng) }
    }
}

impl Classifier for Training<'_> {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut rng = self.rng.borrow_mut();
        self.model.forward(images, Mode::Train(&mut **rng))
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut rng = self.rng.borrow_mut();
        self.model.features(images, Mode::Train(&mut **rng))
    }

    fn is_frozen(&self) -> bool {
        self.model.is_frozen()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(dims: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn task_net_shape_contracts() {
        let net = build_task_net([1, 28, 28], 10, 0).unwrap();
        let out = net.forward(&batch((4, 1, 28, 28), 1), Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[4, 10]);
        let net = build_task_net([3, 32, 32], 10, 0).unwrap();
        let out = net.forward(&batch((2, 3, 32, 32), 1), Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[2, 10]);
        assert!(net.forward(&batch((2, 1, 32, 32), 1), Mode::Eval).is_err());
    }

    #[test]
    fn seeded_builds_are_bitwise_identical() {
        let a = build_task_net([1, 28, 28], 10, 7).unwrap();
        let b = build_task_net([1, 28, 28], 10, 7).unwrap();
        let c = build_task_net([1, 28, 28], 10, 8).unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        let d1 = build_image_discriminator(1, 32, 3).unwrap();
        let d2 = build_image_discriminator(1, 32, 3).unwrap();
        assert_eq!(d1.digest().unwrap(), d2.digest().unwrap());
        let f1 = build_feature_discriminator(500, 3).unwrap();
        let f2 = build_feature_discriminator(500, 3).unwrap();
        assert_eq!(f1.digest().unwrap(), f2.digest().unwrap());
    }

    #[test]
    fn generator_output_in_range() {
        let g = build_generator_with(1, 32, &GeneratorOptions { base_filters: 8, residual_blocks: 2, outer_kernel: 7, downsample: 2 }, 0).unwrap();
        let out = g.forward(&batch((2, 1, 32, 32), 2).affine(5.0, 0.0).unwrap(), Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[2, 1, 32, 32]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn identity_generator_passes_through() {
        let g = build_identity_generator(1, 16).unwrap();
        let x = batch((3, 1, 16, 16), 4);
        let y = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn image_discriminator_patch_output() {
        let d = build_image_discriminator_with(1, 32, &ImageDiscriminatorOptions { base_filters: 8 }, 0).unwrap();
        let zeros = Tensor::zeros((3, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let out = d.forward(&zeros, Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[3, 1, 2, 2]);
        assert!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn feature_discriminator_scores() {
        let d = build_feature_discriminator(500, 0).unwrap();
        let x = Tensor::full(1e4f32, (5, 500), &Device::Cpu).unwrap();
        let out = d.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[5]);
        assert!(out.to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let net = build_task_net([1, 16, 16], 2, 0).unwrap();
        let x = batch((4, 1, 16, 16), 3);
        let a = net.forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let t1 = net.forward(&x, Mode::Train(&mut r1)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let t2 = net.forward(&x, Mode::Train(&mut r2)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
    }

    #[test]
    fn frozen_handles_reject_updates() {
        let net = build_task_net([1, 16, 16], 2, 0).unwrap().freeze();
        assert!(matches!(net.trainable_parameters(), Err(Error::Frozen(_))));
        let (name, var) = net.parameters().next().unwrap();
        let z = var.as_tensor().zeros_like().unwrap();
        assert!(matches!(net.set_parameter(name, &z), Err(Error::Frozen(_))));
        let thawed = net.duplicate(false).unwrap();
        thawed.set_parameter(name, &z).unwrap();
        assert_ne!(thawed.digest().unwrap(), net.digest().unwrap());
    }
}
