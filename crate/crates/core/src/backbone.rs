//! Frozen classifier backbones with named tap points.
//!
//! A backbone is a chain of stages. Stage `i` maps the output of tap `i-1`
//! (or the image for `i = 0`) to tap `i`; the head maps the last tap to
//! logits. Everything before the enhancement tap is the shallow prefix, the
//! rest is the deep suffix the enhancer's output is pushed through.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::graph::{Conv2dOpts, Graph, Var};
use crate::params::{ConvLayer, LinearLayer, ParamSet};
use crate::tensor::{Real, Tensor};

pub const TINYVGG: &str = "tinyvgg";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub name: String,
    /// Ordinal position in the layer sequence; larger is deeper.
    pub index: usize,
    /// (channels, height, width) at the declared input resolution.
    pub output_shape: (usize, usize, usize),
}

impl TapPoint {
    pub fn channels(&self) -> usize {
        self.output_shape.0
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.output_shape.1, self.output_shape.2)
    }
}

impl PartialOrd for TapPoint {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.index.cmp(&other.index))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Clear,
    Degraded,
    EnhancedStage1,
    EnhancedStage2,
}

/// Activations read out of a backbone at a tap, shape (batch, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub data: Tensor<T>,
    pub tap: TapPoint,
    pub domain: DomainTag,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>, tap: TapPoint, domain: DomainTag) -> Result<Self> {
        let (_, c, h, w) = data.dims4()?;
        if (c, h, w) != tap.output_shape {
            return Err(Error::Shape(format!(
                "feature {:?} does not match tap `{}` {:?}",
                data.shape(),
                tap.name,
                tap.output_shape
            )));
        }
        Ok(Self { data, tap, domain })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightsSource {
    /// Built-in architecture with seeded initialization.
    Bundled { seed: u64 },
    /// Named-tensor container produced by [`BackboneHandle::save`] or an
    /// external converter.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture_id: String,
    pub weights: WeightsSource,
    pub input_resolution: (usize, usize),
}

impl BackboneSpec {
    pub fn tinyvgg(weights: WeightsSource) -> Self {
        Self {
            architecture_id: TINYVGG.into(),
            weights,
            input_resolution: (32, 32),
        }
    }
}

/// Where a partial forward pass starts or stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Input,
    Tap(usize),
    Logits,
}

#[derive(Clone, Debug)]
struct Block {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
}

#[derive(Clone, Debug)]
struct Head {
    hidden: LinearLayer,
    out: LinearLayer,
}

const TINYVGG_WIDTHS: [usize; 4] = [16, 32, 64, 128];
const TINYVGG_HIDDEN: usize = 128;
const TINYVGG_CLASSES: usize = 10;

#[derive(Clone, Debug)]
pub struct BackboneHandle<T: Real = f32> {
    pub architecture_id: String,
    pub tap_points: Vec<TapPoint>,
    pub class_count: usize,
    pub input_resolution: (usize, usize),
    frozen: bool,
    params: ParamSet<T>,
    blocks: Vec<Block>,
    head: Head,
}

/// Builds the handle, initializing weights from `spec.weights`.
pub fn load_backbone<T: Real>(spec: &BackboneSpec) -> Result<BackboneHandle<T>> {
    if spec.architecture_id != TINYVGG {
        return Err(Error::UnknownArchitecture(spec.architecture_id.clone()));
    }
    let (h, w) = spec.input_resolution;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "tinyvgg needs an input resolution divisible by 16, got {h}x{w}"
        )));
    }
    let seed = match &spec.weights {
        WeightsSource::Bundled { seed } => *seed,
        WeightsSource::File { .. } => 0,
    };
    let mut handle = BackboneHandle::tinyvgg(spec.input_resolution, seed);
    if let WeightsSource::File { path } = &spec.weights {
        let c = Container::<T>::load(path)?;
        if c.architecture_id != spec.architecture_id {
            return Err(Error::UnknownArchitecture(c.architecture_id));
        }
        handle.params.load_from(&c.tensors)?;
    }
    Ok(handle)
}

impl<T: Real> BackboneHandle<T> {
    fn tinyvgg(input_resolution: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        let (mut h, mut w) = input_resolution;
        let mut cin = 3;
        for (i, &c) in TINYVGG_WIDTHS.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let conv_a = ConvLayer::new(&mut params, &format!("{name}.conv_a"), cin, c, 3, Conv2dOpts::same(3), true, 1.0, &mut rng);
            let conv_b = ConvLayer::new(&mut params, &format!("{name}.conv_b"), c, c, 3, Conv2dOpts::same(3), true, 1.0, &mut rng);
            blocks.push(Block { conv_a, conv_b });
            h /= 2;
            w /= 2;
            taps.push(TapPoint {
                name,
                index: i,
                output_shape: (c, h, w),
            });
            cin = c;
        }
        let head = Head {
            hidden: LinearLayer::new(&mut params, "head.hidden", cin, TINYVGG_HIDDEN, &mut rng),
            out: LinearLayer::new(&mut params, "head.out", TINYVGG_HIDDEN, TINYVGG_CLASSES, &mut rng),
        };
        Self {
            architecture_id: TINYVGG.into(),
            tap_points: taps,
            class_count: TINYVGG_CLASSES,
            input_resolution,
            frozen: true,
            params,
            blocks,
            head,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Checksum of every backbone parameter.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Unfrozen copy for the backbone training recipe.
    pub fn thaw(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable parameters; only available on a thawed handle.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet<T>> {
        if self.frozen {
            return Err(Error::Invalid("backbone is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "input_resolution": [self.input_resolution.0, self.input_resolution.1],
            "class_count": self.class_count,
        });
        Container::new(self.architecture_id.clone(), meta, self.params.clone()).save(path)
    }

    pub fn tap(&self, name: &str) -> Result<&TapPoint> {
        self.tap_points
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    fn check_tap(&self, tap: &TapPoint) -> Result<()> {
        match self.tap_points.get(tap.index) {
            Some(t) if t == tap => Ok(()),
            _ => Err(Error::UnknownTap(tap.name.clone())),
        }
    }

    /// Earliest tap whose spatial size is at most half the input's.
    pub fn default_insertion_tap(&self) -> &TapPoint {
        let (h, w) = self.input_resolution;
        self.tap_points
            .iter()
            .find(|t| 2 * t.output_shape.1 <= h && 2 * t.output_shape.2 <= w)
            .unwrap_or(&self.tap_points[0])
    }

    /// The tap immediately after `tap`, if any.
    pub fn successor(&self, tap: &TapPoint) -> Option<&TapPoint> {
        self.tap_points.get(tap.index + 1)
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        if (h, w) != self.input_resolution {
            return Err(Error::Resolution {
                expected: self.input_resolution,
                found: (h, w),
            });
        }
        Ok(())
    }

    /// Binds parameters into `g`; constants unless the handle is thawed and
    /// `trainable` is requested.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable && !self.frozen)
    }

    /// Runs stages strictly after `from` up to and including `to`, returning
    /// the output at `to` and the outputs at every tap passed on the way.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        from: Position,
        to: Position,
    ) -> Result<(Var, Vec<Var>)> {
        let start = match from {
            Position::Input => 0,
            Position::Tap(i) => i + 1,
            Position::Logits => return Err(self.order_err(from, to)),
        };
        let end = match to {
            Position::Input => return Err(self.order_err(from, to)),
            Position::Tap(i) => i + 1,
            Position::Logits => self.blocks.len(),
        };
        if start > end || (start == end && to != Position::Logits) || end > self.blocks.len() {
            return Err(self.order_err(from, to));
        }
        let mut taps = Vec::new();
        let mut h = x;
        for b in &self.blocks[start..end] {
            h = b.conv_a.apply(g, p, h)?;
            h = g.relu(h);
            h = b.conv_b.apply(g, p, h)?;
            h = g.relu(h);
            h = g.max_pool2(h)?;
            taps.push(h);
        }
        if to == Position::Logits {
            h = g.global_avg_pool(h)?;
            h = self.head.hidden.apply(g, p, h)?;
            h = g.relu(h);
            h = self.head.out.apply(g, p, h)?;
        }
        Ok((h, taps))
    }

    fn order_err(&self, from: Position, to: Position) -> Error {
        let name = |p: Position| match p {
            Position::Input => "input".to_string(),
            Position::Logits => "logits".to_string(),
            Position::Tap(i) => self
                .tap_points
                .get(i)
                .map(|t| t.name.clone())
                .unwrap_or_else(|| format!("#{i}")),
        };
        Error::TapOrder {
            from: name(from),
            to: name(to),
        }
    }

    /// Full forward pass to logits, shape (batch, class_count).
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let (out, _) = self.forward_graph(&mut g, &p, x, Position::Input, Position::Logits)?;
        Ok(g.value(out).clone())
    }

    pub fn extract_features(&self, images: &Tensor<T>, tap: &TapPoint, domain: DomainTag) -> Result<FeatureMap<T>> {
        self.check_tap(tap)?;
        self.check_images(images)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let (out, _) = self.forward_graph(&mut g, &p, x, Position::Input, Position::Tap(tap.index))?;
        FeatureMap::new(g.value(out).clone(), tap.clone(), domain)
    }

    /// Features at every tap in one pass.
    pub fn extract_all(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_images(images)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let last = self.tap_points.len() - 1;
        let (_, taps) = self.forward_graph(&mut g, &p, x, Position::Input, Position::Tap(last))?;
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Suffix of the forward pass from `features.tap` to a deeper tap, or
    /// to logits when `to` is `None`.
    pub fn forward_from(&self, features: &FeatureMap<T>, to: Option<&TapPoint>) -> Result<Tensor<T>> {
        self.check_tap(&features.tap)?;
        let to_pos = match to {
            Some(t) => {
                self.check_tap(t)?;
                Position::Tap(t.index)
            }
            None => Position::Logits,
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(features.data.clone());
        let (out, _) = self.forward_graph(&mut g, &p, x, Position::Tap(features.tap.index), to_pos)?;
        Ok(g.value(out).clone())
    }

    pub fn insert_module(self: &Arc<Self>, enhancer: Arc<dyn Enhancer<T>>, tap: &TapPoint) -> Result<AugmentedBackbone<T>> {
        AugmentedBackbone::new(Arc::clone(self), enhancer, tap)
    }
}

/// A shape-preserving feature-to-feature transform.
pub trait Enhancer<T: Real>: Send + Sync {
    fn enhance(&self, features: &Tensor<T>) -> Result<Tensor<T>>;
}

/// The do-nothing enhancer.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Real> Enhancer<T> for Identity {
    fn enhance(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(features.clone())
    }
}

impl<T: Real, F> Enhancer<T> for F
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Send + Sync,
{
    fn enhance(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self(features)
    }
}

/// `deep(enhancer(shallow(x)))`; immutable once built.
#[derive(Clone)]
pub struct AugmentedBackbone<T: Real = f32> {
    backbone: Arc<BackboneHandle<T>>,
    enhancer: Arc<dyn Enhancer<T>>,
    tap: TapPoint,
}

impl<T: Real> AugmentedBackbone<T> {
    pub fn new(backbone: Arc<BackboneHandle<T>>, enhancer: Arc<dyn Enhancer<T>>, tap: &TapPoint) -> Result<Self> {
        backbone.check_tap(tap)?;
        let (c, h, w) = tap.output_shape;
        let probe = Tensor::full(&[1, c, h, w], T::lit(0.5));
        let out = enhancer.enhance(&probe)?;
        if out.shape() != probe.shape() {
            return Err(Error::ShapeChangingEnhancer {
                tap: tap.name.clone(),
                input: probe.shape().to_vec(),
                output: out.shape().to_vec(),
            });
        }
        Ok(Self {
            backbone,
            enhancer,
            tap: tap.clone(),
        })
    }

    pub fn backbone(&self) -> &BackboneHandle<T> {
        &self.backbone
    }

    pub fn tap(&self) -> &TapPoint {
        &self.tap
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.backbone.extract_features(images, &self.tap, DomainTag::Degraded)?;
        let enhanced = self.enhancer.enhance(&f.data)?;
        if enhanced.shape() != f.data.shape() {
            return Err(Error::ShapeChangingEnhancer {
                tap: self.tap.name.clone(),
                input: f.data.shape().to_vec(),
                output: enhanced.shape().to_vec(),
            });
        }
        let ef = FeatureMap::new(enhanced, self.tap.clone(), DomainTag::EnhancedStage2)?;
        self.backbone.forward_from(&ef, None)
    }
}
