//! Shape-preserving feature generators and patch discriminators.
//!
//! Convolutions use reflect padding wherever the map is at least 2×2, so a
//! spatially constant input stays constant through every layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Enhancer;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::{Conv2dOpts, Graph, Var};
use crate::params::{ConvLayer, ParamSet};
use crate::tensor::{Real, Tensor};

pub const GENERATOR_ID: &str = "ufem.generator";
pub const DISCRIMINATOR_ID: &str = "ufem.discriminator";

/// Gain on the last generator layer under [`GeneratorInit::NearIdentity`].
pub const NEAR_IDENTITY_GAIN: f64 = 2.5e-4;
const NORM_EPS: f64 = 1e-5;
const MAX_WIDTH_MULT: usize = 8;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    FlatResidual,
    Unet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorInit {
    NearIdentity,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub architecture: GeneratorArch,
    pub in_channels: usize,
    pub base_width: usize,
    /// Used by `flat_residual`.
    pub residual_blocks: usize,
    /// Used by `unet`, 1..=3.
    pub down_levels: usize,
    pub init: GeneratorInit,
    /// Apply ReLU to the output, keeping it in the non-negative range of
    /// tapped features.
    pub rectify_output: bool,
    /// Spatial size (H, W) of the features the generator will see.
    pub feature_hw: (usize, usize),
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            architecture: GeneratorArch::FlatResidual,
            in_channels: 16,
            base_width: 64,
            residual_blocks: 4,
            down_levels: 2,
            init: GeneratorInit::NearIdentity,
            rectify_output: true,
            feature_hw: (16, 16),
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channels must be positive".into()));
        }
        let (h, w) = self.feature_hw;
        if h == 0 || w == 0 {
            return Err(Error::Config("generator feature size must be positive".into()));
        }
        if self.architecture == GeneratorArch::Unet {
            if !(1..=3).contains(&self.down_levels) {
                return Err(Error::Config(format!("down_levels must be 1..=3, got {}", self.down_levels)));
            }
            let f = 1usize << self.down_levels;
            if h < f || w < f || h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "down_levels {} would reduce {h}x{w} features below 1x1 or to a non-integer size",
                    self.down_levels
                )));
            }
        }
        Ok(())
    }
}

fn width(base: usize, level: usize) -> usize {
    base * (1usize << level).min(MAX_WIDTH_MULT)
}

/// 3×3 (or other odd/even kernel) convolution with reflect padding when the
/// map allows it, zero padding otherwise.
fn padded_conv<T: Real>(g: &mut Graph<T>, p: &[Var], layer: &ConvLayer, x: Var, pad: usize) -> Result<Var> {
    let (_, _, h, w) = g.value(x).dims4()?;
    if pad > 0 && pad < h && pad < w {
        let xp = g.reflect_pad(x, pad)?;
        g.conv2d(xp, p[layer.weight], layer.bias.map(|b| p[b]), Conv2dOpts { pad: 0, ..layer.opts })
    } else {
        g.conv2d(x, p[layer.weight], layer.bias.map(|b| p[b]), Conv2dOpts { pad, ..layer.opts })
    }
}

fn conv_norm_relu<T: Real>(g: &mut Graph<T>, p: &[Var], layer: &ConvLayer, x: Var) -> Result<Var> {
    let y = padded_conv(g, p, layer, x, 1)?;
    let y = g.instance_norm(y, T::lit(NORM_EPS))?;
    Ok(g.relu(y))
}

#[derive(Clone, Debug)]
enum Body {
    Flat {
        head: ConvLayer,
        blocks: Vec<(ConvLayer, ConvLayer)>,
    },
    Unet {
        head: ConvLayer,
        downs: Vec<ConvLayer>,
        bottleneck: ConvLayer,
        /// (upsampling conv, merge conv after the skip concat), shallowest first.
        ups: Vec<(ConvLayer, ConvLayer)>,
    },
}

/// A parameterized feature translator (B, C, H, W) → (B, C, H, W).
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    pub spec: GeneratorSpec,
    params: ParamSet<T>,
    body: Body,
    tail: ConvLayer,
}

pub fn build_generator<T: Real>(spec: &GeneratorSpec) -> Result<Generator<T>> {
    Generator::new(spec)
}

impl<T: Real> Generator<T> {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut ps = ParamSet::new();
        let s3 = Conv2dOpts::same(3);
        let c = spec.in_channels;
        let bw = spec.base_width;
        let mut conv = |ps: &mut ParamSet<T>, name: &str, cin, cout, opts, gain| {
            ConvLayer::new(ps, name, cin, cout, 3, opts, true, gain, &mut rng)
        };
        let body = match spec.architecture {
            GeneratorArch::FlatResidual => {
                let head = conv(&mut ps, "head", c, bw, s3, 1.0);
                let blocks = (0..spec.residual_blocks)
                    .map(|i| {
                        (
                            conv(&mut ps, &format!("block{i}.conv_a"), bw, bw, s3, 1.0),
                            conv(&mut ps, &format!("block{i}.conv_b"), bw, bw, s3, 1.0),
                        )
                    })
                    .collect();
                Body::Flat { head, blocks }
            }
            GeneratorArch::Unet => {
                let head = conv(&mut ps, "head", c, bw, s3, 1.0);
                let down_opts = Conv2dOpts { stride: 2, pad: 1 };
                let downs = (0..spec.down_levels)
                    .map(|l| conv(&mut ps, &format!("down{l}"), width(bw, l), width(bw, l + 1), down_opts, 1.0))
                    .collect();
                let deep = width(bw, spec.down_levels);
                let bottleneck = conv(&mut ps, "bottleneck", deep, deep, s3, 1.0);
                let ups = (0..spec.down_levels)
                    .map(|l| {
                        (
                            conv(&mut ps, &format!("up{l}"), width(bw, l + 1), width(bw, l), s3, 1.0),
                            conv(&mut ps, &format!("merge{l}"), 2 * width(bw, l), width(bw, l), s3, 1.0),
                        )
                    })
                    .collect();
                Body::Unet {
                    head,
                    downs,
                    bottleneck,
                    ups,
                }
            }
        };
        let tail_gain = match spec.init {
            GeneratorInit::NearIdentity => NEAR_IDENTITY_GAIN,
            GeneratorInit::Standard => 1.0,
        };
        let tail = conv(&mut ps, "tail", bw, c, s3, tail_gain);
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            body,
            tail,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Zeroes the last layer so the residual branch vanishes; the generator
    /// becomes the identity on non-negative inputs (on all inputs when the
    /// output is not rectified).
    pub fn zero_residual(&mut self) {
        for idx in std::iter::once(self.tail.weight).chain(self.tail.bias) {
            self.params.tensor_mut(idx).data_mut().fill(T::zero());
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects (B, {}, H, W), got {shape:?}",
                self.spec.in_channels
            )));
        }
        if self.spec.architecture == GeneratorArch::Unet {
            let f = 1usize << self.spec.down_levels;
            if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
                return Err(Error::Shape(format!(
                    "unet with {} levels needs H, W divisible by {f}, got {shape:?}",
                    self.spec.down_levels
                )));
            }
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let h = match &self.body {
            Body::Flat { head, blocks } => {
                let mut h = conv_norm_relu(g, p, head, x)?;
                for (a, b) in blocks {
                    let r = conv_norm_relu(g, p, a, h)?;
                    let r = padded_conv(g, p, b, r, 1)?;
                    let r = g.instance_norm(r, T::lit(NORM_EPS))?;
                    h = g.add(h, r)?;
                }
                h
            }
            Body::Unet {
                head,
                downs,
                bottleneck,
                ups,
            } => {
                let mut h = conv_norm_relu(g, p, head, x)?;
                let mut skips = Vec::with_capacity(downs.len());
                for d in downs {
                    skips.push(h);
                    h = conv_norm_relu(g, p, d, h)?;
                }
                h = conv_norm_relu(g, p, bottleneck, h)?;
                for ((up, merge), skip) in ups.iter().zip(skips).rev() {
                    h = g.upsample2(h)?;
                    h = conv_norm_relu(g, p, up, h)?;
                    h = g.concat_channels(h, skip)?;
                    h = conv_norm_relu(g, p, merge, h)?;
                }
                h
            }
        };
        let out = padded_conv(g, p, &self.tail, h, 1)?;
        let y = g.add(x, out)?;
        Ok(if self.spec.rectify_output { g.relu(y) } else { y })
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let y = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        Ok(Container::new(
            GENERATOR_ID,
            serde_json::json!({ "spec": self.spec }),
            self.params.clone(),
        ))
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.architecture_id != GENERATOR_ID {
            return Err(Error::Incompatible(format!("expected a generator, found '{}'", c.architecture_id)));
        }
        let spec: GeneratorSpec = serde_json::from_value(c.metadata["spec"].clone())?;
        Self::from_parts(&spec, &c.tensors)
    }

    /// Rebuilds from a spec and matching named tensors.
    pub fn from_parts(spec: &GeneratorSpec, tensors: &ParamSet<T>) -> Result<Self> {
        let mut g = Self::new(spec)?;
        g.params.load_from(tensors)?;
        Ok(g)
    }
}

impl<T: Real> Enhancer<T> for Generator<T> {
    fn enhance(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    /// Requested stride-2 layers; capped so the output stays at least 1×1.
    pub layers: usize,
    pub base_width: usize,
    pub feature_hw: (usize, usize),
    pub seed: u64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 16,
            layers: 3,
            base_width: 64,
            feature_hw: (16, 16),
            seed: 0,
        }
    }
}

impl DiscriminatorSpec {
    /// Number of stride-2 layers actually built.
    pub fn effective_layers(&self) -> Result<usize> {
        let (h, w) = self.feature_hw;
        let side = h.min(w);
        if side < 2 {
            return Err(Error::Config(format!("discriminator input {h}x{w} is too small to downsample")));
        }
        if self.layers == 0 || self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator layers and widths must be positive".into()));
        }
        Ok(self.layers.min(side.ilog2() as usize))
    }

    pub fn output_hw(&self) -> Result<(usize, usize)> {
        let n = self.effective_layers()?;
        Ok((self.feature_hw.0 >> n, self.feature_hw.1 >> n))
    }
}

/// PatchGAN: stride-2 4×4 convolutions with LeakyReLU, instance norm after
/// the first layer, and a final 3×3 convolution to one logit channel.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    pub spec: DiscriminatorSpec,
    params: ParamSet<T>,
    layers: Vec<ConvLayer>,
    out: ConvLayer,
}

pub fn build_discriminator<T: Real>(spec: &DiscriminatorSpec) -> Result<Discriminator<T>> {
    Discriminator::new(spec)
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: &DiscriminatorSpec) -> Result<Self> {
        let n = spec.effective_layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut ps = ParamSet::new();
        let opts = Conv2dOpts { stride: 2, pad: 1 };
        let mut cin = spec.in_channels;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let cout = width(spec.base_width, i);
            layers.push(ConvLayer::new(&mut ps, &format!("layer{i}"), cin, cout, 4, opts, i == 0, 1.0, &mut rng));
            cin = cout;
        }
        let out = ConvLayer::new(&mut ps, "out", cin, 1, 3, Conv2dOpts::same(3), true, 1.0, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            params: ps,
            layers,
            out,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// Raw patch logits, (B, 1, h, w).
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects (B, {}, H, W), got {shape:?}",
                self.spec.in_channels
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = padded_conv(g, p, layer, h, 1)?;
            let (_, _, hh, ww) = g.value(h).dims4()?;
            if i > 0 && hh * ww > 1 {
                h = g.instance_norm(h, T::lit(NORM_EPS))?;
            }
            h = g.leaky_relu(h, T::lit(LEAK));
        }
        padded_conv(g, p, &self.out, h, 1)
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let y = self.forward_graph(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        Ok(Container::new(
            DISCRIMINATOR_ID,
            serde_json::json!({ "spec": self.spec }),
            self.params.clone(),
        ))
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.architecture_id != DISCRIMINATOR_ID {
            return Err(Error::Incompatible(format!("expected a discriminator, found '{}'", c.architecture_id)));
        }
        let spec: DiscriminatorSpec = serde_json::from_value(c.metadata["spec"].clone())?;
        Self::from_parts(&spec, &c.tensors)
    }

    pub fn from_parts(spec: &DiscriminatorSpec, tensors: &ParamSet<T>) -> Result<Self> {
        let mut d = Self::new(spec)?;
        d.params.load_from(tensors)?;
        Ok(d)
    }
}
