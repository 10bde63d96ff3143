use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    TaskNet,
    Generator,
    ImageDiscriminator,
    FeatureDiscriminator,
    ToySegNet,
}

/// Weight initialization scheme of a parameterized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Init {
    /// Weights ~ N(0, std), zero bias.
    Normal { std: f64 },
    /// Weights and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, init: Init },
    Deconv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        init: Init,
    },
    Linear { in_features: usize, out_features: usize, init: Init },
    MaxPool { size: usize },
    Flatten,
    Dropout { p: f64 },
    InstanceNorm,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    /// `x + scale * (conv3x3 -> IN -> ReLU -> conv3x3 -> IN)(x)`.
    Residual { channels: usize, scale: f64, init: Init },
}

/// Activation shape between layers, batch dimension excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Image { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }
}

/// Which task-net activation feeds the feature discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureLayer {
    /// Final pre-softmax class scores.
    #[default]
    Logits,
    /// Output of the hidden fully connected layer.
    Penultimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub role: Role,
    /// `(C, H, W)` for image inputs, `(D, 1, 1)` for flat feature inputs.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Index of the layer whose output is the adaptation feature.
    #[serde(default)]
    pub feature_tap: Option<usize>,
    /// Debug generator that returns its input unchanged.
    #[serde(default)]
    pub passthrough: bool,
}

impl ArchitectureSpec {
    fn input_act(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        match self.role {
            Role::FeatureDiscriminator => ActShape::Flat(c),
            _ => ActShape::Image { c, h, w },
        }
    }

    /// Activation shapes after every layer; fails on incompatible neighbours.
    pub fn layer_shapes(&self) -> Result<Vec<ActShape>> {
        let mut shape = self.input_act();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = next_shape(shape, layer).map_err(|e| Error::Shape(format!("layer {i} ({layer:?}): {e}")))?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        Ok(self.layer_shapes()?.last().copied().unwrap_or(self.input_act()))
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        if let Some(tap) = self.feature_tap {
            if tap >= self.layers.len() {
                return Err(Error::Shape(format!("feature tap {tap} beyond {} layers", self.layers.len())));
            }
        }
        if self.role == Role::Generator {
            if self.layers.last() != Some(&Layer::Tanh) {
                return Err(Error::Shape("generator must end in tanh".into()));
            }
            if shapes.last().copied() != Some(self.input_act()) {
                return Err(Error::Shape("generator output shape must equal its input shape".into()));
            }
        }
        if self.role == Role::ImageDiscriminator {
            match shapes.last() {
                Some(ActShape::Image { c: 1, .. }) => {}
                other => return Err(Error::Shape(format!("image discriminator must emit one channel, got {other:?}"))),
            }
        }
        Ok(())
    }

    /// Width of the designated feature layer.
    pub fn feature_dim(&self) -> Result<usize> {
        let tap = self.feature_tap.ok_or_else(|| Error::InvalidArgument("architecture has no feature layer".into()))?;
        Ok(self.layer_shapes()?[tap].numel())
    }
}

fn next_shape(shape: ActShape, layer: &Layer) -> std::result::Result<ActShape, String> {
    let conv_out = |size: usize, k: usize, s: usize, p: usize| -> std::result::Result<usize, String> {
        if size + 2 * p < k || s == 0 {
            return Err(format!("kernel {k} does not fit input {size} with padding {p}"));
        }
        Ok((size + 2 * p - k) / s + 1)
    };
    match (layer.clone(), shape) {
        (Layer::Conv { in_channels, out_channels, kernel, stride, padding, .. }, ActShape::Image { c, h, w }) => {
            if c != in_channels {
                return Err(format!("expects {in_channels} channels, got {c}"));
            }
            Ok(ActShape::Image {
                c: out_channels,
                h: conv_out(h, kernel, stride, padding)?,
                w: conv_out(w, kernel, stride, padding)?,
            })
        }
        (
            Layer::Deconv { in_channels, out_channels, kernel, stride, padding, output_padding, .. },
            ActShape::Image { c, h, w },
        ) => {
            if c != in_channels {
                return Err(format!("expects {in_channels} channels, got {c}"));
            }
            let up = |n: usize| (n - 1) * stride + kernel + output_padding;
            if up(h) < 2 * padding || up(w) < 2 * padding {
                return Err("padding exceeds deconvolution output".into());
            }
            Ok(ActShape::Image { c: out_channels, h: up(h) - 2 * padding, w: up(w) - 2 * padding })
        }
        (Layer::Linear { in_features, out_features, .. }, ActShape::Flat(n)) => {
            if n != in_features {
                return Err(format!("expects {in_features} features, got {n}"));
            }
            Ok(ActShape::Flat(out_features))
        }
        (Layer::MaxPool { size }, ActShape::Image { c, h, w }) => {
            if size == 0 || h < size || w < size {
                return Err(format!("pool {size} larger than {h}x{w}"));
            }
            Ok(ActShape::Image { c, h: h / size, w: w / size })
        }
        (Layer::Flatten, s) => Ok(ActShape::Flat(s.numel())),
        (Layer::Residual { channels, .. }, ActShape::Image { c, h, w }) => {
            if c != channels {
                return Err(format!("residual block expects {channels} channels, got {c}"));
            }
            Ok(ActShape::Image { c, h, w })
        }
        (Layer::InstanceNorm, s @ ActShape::Image { .. }) => Ok(s),
        (Layer::Dropout { p }, s) if (0.0..1.0).contains(&p) => Ok(s),
        (Layer::Dropout { p }, _) => Err(format!("dropout probability {p} outside [0, 1)")),
        (Layer::Relu | Layer::LeakyRelu { .. } | Layer::Tanh, s) => Ok(s),
        (l, s) => Err(format!("{l:?} cannot consume {s:?}")),
    }
}

/// Widths of the LeNet-style classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskNetOptions {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub feature_layer: FeatureLayer,
}

impl Default for TaskNetOptions {
    fn default() -> Self {
        Self { conv1: 20, conv2: 50, hidden: 500, dropout: 0.5, feature_layer: FeatureLayer::Logits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorOptions {
    pub base_filters: usize,
    pub residual_blocks: usize,
    /// Odd kernel size of the first and last convolution.
    pub outer_kernel: usize,
    /// Stride-2 convolutions before the residual blocks (mirrored by deconvs after).
    pub downsample: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self { base_filters: 64, residual_blocks: 2, outer_kernel: 7, downsample: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageDiscriminatorOptions {
    pub base_filters: usize,
}

impl Default for ImageDiscriminatorOptions {
    fn default() -> Self {
        Self { base_filters: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureDiscriminatorOptions {
    pub hidden: usize,
}

impl Default for FeatureDiscriminatorOptions {
    fn default() -> Self {
        Self { hidden: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetOptions {
    pub width: usize,
}

impl Default for SegNetOptions {
    fn default() -> Self {
        Self { width: 16 }
    }
}

const GAN_INIT: Init = Init::Normal { std: 0.02 };

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, init: Init) -> Layer {
    Layer::Conv { in_channels, out_channels, kernel, stride, padding, init }
}

/// conv5(20) -> pool -> conv5(50) -> pool -> fc(500) -> dropout -> fc(K), ReLU throughout.
pub fn task_net_spec(input_shape: [usize; 3], num_classes: usize, opts: &TaskNetOptions) -> Result<ArchitectureSpec> {
    let [c, h, w] = input_shape;
    if h < 16 || w < 16 {
        return Err(Error::Shape(format!("task net needs H, W >= 16, got {h}x{w}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let flat = {
        let side = |n: usize| ((n - 4) / 2 - 4) / 2;
        opts.conv2 * side(h) * side(w)
    };
    let layers = vec![
        conv(c, opts.conv1, 5, 1, 0, Init::FanIn),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        conv(opts.conv1, opts.conv2, 5, 1, 0, Init::FanIn),
        Layer::Relu,
        Layer::MaxPool { size: 2 },
        Layer::Flatten,
        Layer::Linear { in_features: flat, out_features: opts.hidden, init: Init::FanIn },
        Layer::Relu,
        Layer::Dropout { p: opts.dropout },
        Layer::Linear { in_features: opts.hidden, out_features: num_classes, init: Init::FanIn },
    ];
    let tap = match opts.feature_layer {
        FeatureLayer::Logits => layers.len() - 1,
        FeatureLayer::Penultimate => 8,
    };
    let spec = ArchitectureSpec { role: Role::TaskNet, input_shape, layers, feature_tap: Some(tap), passthrough: false };
    spec.validate()?;
    Ok(spec)
}

/// Two stride-2 convolutions, residual blocks, two transposed convolutions, tanh.
pub fn generator_spec(channels: usize, image_size: usize, opts: &GeneratorOptions) -> Result<ArchitectureSpec> {
    let scale = 1usize << opts.downsample;
    if image_size == 0 || image_size % scale != 0 {
        return Err(Error::Shape(format!("generator image size must be a positive multiple of {scale}, got {image_size}")));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument("generator needs at least one channel".into()));
    }
    let k = opts.outer_kernel;
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("generator outer kernel must be odd, got {k}")));
    }
    let f = opts.base_filters;
    let mut layers = vec![conv(channels, f, k, 1, k / 2, GAN_INIT), Layer::InstanceNorm, Layer::Relu];
    for i in 0..opts.downsample {
        layers.push(conv(f << i, f << (i + 1), 3, 2, 1, GAN_INIT));
        layers.push(Layer::InstanceNorm);
        layers.push(Layer::Relu);
    }
    for _ in 0..opts.residual_blocks {
        layers.push(Layer::Residual { channels: f << opts.downsample, scale: 1.0, init: GAN_INIT });
    }
    for i in (0..opts.downsample).rev() {
        layers.push(Layer::Deconv {
            in_channels: f << (i + 1),
            out_channels: f << i,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
            init: GAN_INIT,
        });
        layers.push(Layer::InstanceNorm);
        layers.push(Layer::Relu);
    }
    layers.push(conv(f, channels, k, 1, k / 2, GAN_INIT));
    layers.push(Layer::Tanh);
    let spec = ArchitectureSpec {
        role: Role::Generator,
        input_shape: [channels, image_size, image_size],
        layers,
        feature_tap: None,
        passthrough: false,
    };
    spec.validate()?;
    Ok(spec)
}

/// Six convolutions ending in a one-channel score map; instance norm is
/// skipped on the first layer and wherever the map has collapsed to 1x1.
pub fn image_discriminator_spec(
    channels: usize,
    image_size: usize,
    opts: &ImageDiscriminatorOptions,
) -> Result<ArchitectureSpec> {
    let f = opts.base_filters;
    let widths = [f, 2 * f, 4 * f, 8 * f, 8 * f];
    let mut layers = Vec::new();
    let mut cin = channels;
    let mut side = image_size;
    for (i, &cout) in widths.iter().enumerate() {
        let (k, s, p) = if i < 4 { (4, 2, 1) } else { (3, 1, 1) };
        if side + 2 * p < k {
            return Err(Error::Shape(format!("image size {image_size} too small for the discriminator stack")));
        }
        side = (side + 2 * p - k) / s + 1;
        layers.push(conv(cin, cout, k, s, p, GAN_INIT));
        if i > 0 && side > 1 {
            layers.push(Layer::InstanceNorm);
        }
        layers.push(Layer::LeakyRelu { slope: 0.2 });
        cin = cout;
    }
    layers.push(conv(cin, 1, 3, 1, 1, GAN_INIT));
    let spec = ArchitectureSpec {
        role: Role::ImageDiscriminator,
        input_shape: [channels, image_size, image_size],
        layers,
        feature_tap: None,
        passthrough: false,
    };
    spec.validate()?;
    Ok(spec)
}

/// Three fully connected layers mapping `(B, D)` features to `(B,)` scores.
pub fn feature_discriminator_spec(feature_dim: usize, opts: &FeatureDiscriminatorOptions) -> Result<ArchitectureSpec> {
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
    }
    let h = opts.hidden;
    let layers = vec![
        Layer::Linear { in_features: feature_dim, out_features: h, init: Init::FanIn },
        Layer::Relu,
        Layer::Linear { in_features: h, out_features: h, init: Init::FanIn },
        Layer::Relu,
        Layer::Linear { in_features: h, out_features: 1, init: Init::FanIn },
    ];
    let spec = ArchitectureSpec {
        role: Role::FeatureDiscriminator,
        input_shape: [feature_dim, 1, 1],
        layers,
        feature_tap: None,
        passthrough: false,
    };
    spec.validate()?;
    Ok(spec)
}

/// Small fully convolutional net producing per-pixel class scores.
pub fn toy_seg_net_spec(input_shape: [usize; 3], num_classes: usize, opts: &SegNetOptions) -> Result<ArchitectureSpec> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let w = opts.width;
    let layers = vec![
        conv(input_shape[0], w, 3, 1, 1, Init::FanIn),
        Layer::Relu,
        conv(w, w, 3, 1, 1, Init::FanIn),
        Layer::Relu,
        conv(w, num_classes, 1, 1, 0, Init::FanIn),
    ];
    let spec = ArchitectureSpec {
        role: Role::ToySegNet,
        input_shape,
        feature_tap: Some(layers.len() - 1),
        layers,
        passthrough: false,
    };
    spec.validate()?;
    Ok(spec)
}
