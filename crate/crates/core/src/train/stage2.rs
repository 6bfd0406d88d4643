//! Stage 2: a second generator `G_E2C` that pulls the channel correlations
//! of Stage-1 output towards clear-domain statistics.
//!
//! Stage-1 output EF is computed once with the frozen `G_D2C`. Each step
//! enhances a batch of EF, pushes it through the frozen deep layers, and
//! compares per-tap Gram matrices against the mean Gram of an unpaired
//! clear batch. A content term keeps the deepest representation close to
//! that of EF, and a single discriminator at the enhancement tap supplies
//! the adversarial term.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::{adv_d_graph, adv_g_graph, correlation_term_graph, CorrelationMode, GanMode, Stage2Lambdas};
use super::stage1::{load_nonempty, short, Stage1Checkpoint};
use super::{
    extract_tap_features, gather, map_batches, non_finite, require_frozen, sub_seed, HistoryBuffer, LossLog,
    RunOutputs, Schedule,
};
use crate::backbone::{BackboneHandle, Position, TapPoint};
use crate::container::Container;
use crate::data::image::RgbImage;
use crate::data::manifest::DatasetManifest;
use crate::data::sampler::UnpairedSampler;
use crate::dcp::GramNormalization;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::tensor::{Real, Tensor};

pub const STAGE2_ID: &str = "ufem.stage2";

/// What each generated Gram is compared against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramTarget {
    /// Mean Gram of the sampled clear batch, shared by every sample.
    #[default]
    BatchMean,
    /// The Gram of the clear sample drawn in the same batch position.
    PerSample,
    /// Mean clear Gram compared with the mean Gram of the enhanced batch,
    /// matching the statistic without pulling samples towards each other.
    MeanToMean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentAnchor {
    /// The Stage-1 output the sample was enhanced from.
    #[default]
    Ef,
    /// Batch mean of the sampled clear features.
    Cf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lambda_corr: f64,
    pub lambda_adv: f64,
    pub lambda_content: f64,
    /// One weight per correlation tap, shallowest first.
    pub layer_weights: Vec<f64>,
    /// Tap names, strictly increasing in depth and no shallower than the
    /// enhancement tap. Empty selects the enhancement tap and the taps
    /// after it, one per layer weight.
    pub correlation_taps: Vec<String>,
    /// Defaults to the deepest correlation tap.
    pub content_tap: Option<String>,
    pub correlation_mode: CorrelationMode,
    pub gram_normalization: GramNormalization,
    pub gram_target: GramTarget,
    pub content_anchor: ContentAnchor,
    pub gan_mode: GanMode,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub history_buffer: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_corr: 1000.0,
            lambda_adv: 5.0,
            lambda_content: 10.0,
            layer_weights: vec![1.0, 2.0, 3.0, 4.0],
            correlation_taps: Vec::new(),
            content_tap: None,
            correlation_mode: CorrelationMode::L1,
            gram_normalization: GramNormalization::Raw,
            gram_target: GramTarget::BatchMean,
            content_anchor: ContentAnchor::Ef,
            gan_mode: GanMode::LeastSquares,
            lr_g: 2e-4,
            lr_d: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 200,
            batch: 5,
            schedule: Schedule::LinearDecay,
            history_buffer: 50,
            seed: 0,
            checkpoint_every: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_corr, self.lambda_adv, self.lambda_content];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("stage-2 lambdas must be finite and non-negative, got {lambdas:?}")));
        }
        if self.layer_weights.is_empty() || self.layer_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("layer_weights must be non-empty and non-negative".into()));
        }
        if !self.correlation_taps.is_empty() && self.correlation_taps.len() != self.layer_weights.len() {
            return Err(Error::Config(format!(
                "{} correlation taps but {} layer weights",
                self.correlation_taps.len(),
                self.layer_weights.len()
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Stage2Lambdas {
        Stage2Lambdas {
            correlation: self.lambda_corr,
            adv: self.lambda_adv,
            content: self.lambda_content,
        }
    }

    /// (correlation taps, content tap) on `backbone` for enhancement at `tap`.
    pub fn resolve_taps<T: Real>(&self, backbone: &BackboneHandle<T>, tap: &TapPoint) -> Result<(Vec<TapPoint>, TapPoint)> {
        let t0 = backbone.tap(&tap.name)?.clone();
        let corr: Vec<TapPoint> = if self.correlation_taps.is_empty() {
            let n = self.layer_weights.len();
            let taps: Vec<TapPoint> = backbone.tap_points.iter().skip(t0.index).take(n).cloned().collect();
            if taps.len() < n {
                return Err(Error::Config(format!(
                    "{n} correlation taps requested from `{}` but only {} are available",
                    t0.name,
                    taps.len()
                )));
            }
            taps
        } else {
            self.correlation_taps
                .iter()
                .map(|n| backbone.tap(n).cloned())
                .collect::<Result<_>>()?
        };
        if corr[0].index < t0.index || corr.windows(2).any(|w| w[1].index <= w[0].index) {
            return Err(Error::Config(
                "correlation taps must be strictly increasing and no shallower than the enhancement tap".into(),
            ));
        }
        let content = match &self.content_tap {
            Some(n) => backbone.tap(n)?.clone(),
            None => corr.last().cloned().expect("non-empty"),
        };
        if content.index < t0.index {
            return Err(Error::Config("content tap is shallower than the enhancement tap".into()));
        }
        Ok((corr, content))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Breakdown {
    pub step: usize,
    pub epoch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Unweighted per-tap correlation distances.
    pub correlation_per_tap: Vec<f64>,
    /// Weighted sum over taps.
    pub correlation: f64,
    pub adv: f64,
    pub content: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl Stage2Breakdown {
    pub fn all_finite(&self) -> bool {
        [self.correlation, self.adv, self.content, self.total_g, self.total_d]
            .iter()
            .chain(&self.correlation_per_tap)
            .all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Losses {
    pub correlation_per_tap: Vec<f64>,
    pub correlation: f64,
    pub adv: f64,
    pub content: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Checkpoint<T: Real = f32> {
    pub config: Stage2Config,
    pub step: usize,
    pub tap: TapPoint,
    pub backbone_id: String,
    pub backbone_checksum: String,
    /// Checksum of the frozen Stage-1 generator this stage was trained on.
    pub g_d2c_checksum: String,
    pub g_e2c: Generator<T>,
    pub d_c: Discriminator<T>,
}

#[derive(Serialize, Deserialize)]
struct Stage2Meta {
    config: Stage2Config,
    step: usize,
    tap: TapPoint,
    backbone_id: String,
    backbone_checksum: String,
    g_d2c_checksum: String,
    g_e2c: GeneratorSpec,
    d_c: DiscriminatorSpec,
}

impl<T: Real> Stage2Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container<T>> {
        let mut ps = ParamSet::new();
        ps.extend_prefixed("g_e2c", self.g_e2c.params());
        ps.extend_prefixed("d_c", self.d_c.params());
        let meta = Stage2Meta {
            config: self.config.clone(),
            step: self.step,
            tap: self.tap.clone(),
            backbone_id: self.backbone_id.clone(),
            backbone_checksum: self.backbone_checksum.clone(),
            g_d2c_checksum: self.g_d2c_checksum.clone(),
            g_e2c: self.g_e2c.spec.clone(),
            d_c: self.d_c.spec.clone(),
        };
        Ok(Container::new(STAGE2_ID, serde_json::to_value(meta)?, ps))
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.architecture_id != STAGE2_ID {
            return Err(Error::Incompatible(format!(
                "expected a stage-2 checkpoint, found '{}'",
                c.architecture_id
            )));
        }
        let meta: Stage2Meta = serde_json::from_value(c.metadata.clone())?;
        Ok(Self {
            g_e2c: Generator::from_parts(&meta.g_e2c, &c.tensors.with_prefix("g_e2c"))?,
            d_c: Discriminator::from_parts(&meta.d_c, &c.tensors.with_prefix("d_c"))?,
            config: meta.config,
            step: meta.step,
            tap: meta.tap,
            backbone_id: meta.backbone_id,
            backbone_checksum: meta.backbone_checksum,
            g_d2c_checksum: meta.g_d2c_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Clear-side statistics and Stage-1 outputs cached for the whole run.
struct Cache<T> {
    clear: Tensor<T>,
    ef: Tensor<T>,
    /// Per correlation tap, (N_clear, C, C).
    clear_grams: Vec<Tensor<T>>,
    clear_content: Tensor<T>,
    ef_content: Tensor<T>,
}

pub struct Stage2Trainer<'a, T: Real = f32> {
    pub config: Stage2Config,
    backbone: &'a BackboneHandle<T>,
    tap: TapPoint,
    corr_taps: Vec<TapPoint>,
    content_tap: TapPoint,
    g_d2c: &'a Generator<T>,
    g_d2c_checksum: String,
    pub g_e2c: Generator<T>,
    pub d_c: Discriminator<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    pool: HistoryBuffer<T>,
    step: usize,
}

struct GenGraph {
    p: Vec<Var>,
    enhanced: Var,
    corr: Vec<Var>,
    corr_total: Var,
    adv: Var,
    content: Var,
    total: Var,
}

impl<'a, T: Real> Stage2Trainer<'a, T> {
    pub fn new(config: &Stage2Config, backbone: &'a BackboneHandle<T>, tap: &TapPoint, g_d2c: &'a Generator<T>) -> Result<Self> {
        config.validate()?;
        require_frozen(backbone)?;
        let (corr_taps, content_tap) = config.resolve_taps(backbone, tap)?;
        let tap = backbone.tap(&tap.name)?.clone();
        if g_d2c.spec.in_channels != tap.channels() || g_d2c.spec.feature_hw != tap.spatial() {
            return Err(Error::Incompatible(format!(
                "stage-1 generator expects {} channels at {:?}, tap `{}` has {:?}",
                g_d2c.spec.in_channels, g_d2c.spec.feature_hw, tap.name, tap.output_shape
            )));
        }
        let g_e2c = Generator::new(&GeneratorSpec {
            in_channels: tap.channels(),
            feature_hw: tap.spatial(),
            seed: sub_seed(config.seed, 101),
            ..config.generator.clone()
        })?;
        let d_c = Discriminator::new(&DiscriminatorSpec {
            in_channels: tap.channels(),
            feature_hw: tap.spatial(),
            seed: sub_seed(config.seed, 110),
            ..config.discriminator.clone()
        })?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: 1e-8,
        };
        Ok(Self {
            opt_g: Adam::new(g_e2c.params(), adam(config.lr_g)),
            opt_d: Adam::new(d_c.params(), adam(config.lr_d)),
            pool: HistoryBuffer::new(config.history_buffer, sub_seed(config.seed, 130)),
            config: config.clone(),
            backbone,
            tap,
            corr_taps,
            content_tap,
            g_d2c_checksum: g_d2c.checksum(),
            g_d2c,
            g_e2c,
            d_c,
            step: 0,
        })
    }

    pub fn correlation_taps(&self) -> &[TapPoint] {
        &self.corr_taps
    }

    pub fn content_tap(&self) -> &TapPoint {
        &self.content_tap
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Stage2Checkpoint<T> {
        Stage2Checkpoint {
            config: self.config.clone(),
            step: self.step,
            tap: self.tap.clone(),
            backbone_id: self.backbone.architecture_id.clone(),
            backbone_checksum: self.backbone.checksum(),
            g_d2c_checksum: self.g_d2c_checksum.clone(),
            g_e2c: self.g_e2c.clone(),
            d_c: self.d_c.clone(),
        }
    }

    /// Gram matrices at every correlation tap and features at the content
    /// tap, for features `x` at the enhancement tap.
    fn statistics(&self, g: &mut Graph<T>, bp: &[Var], x: Var) -> Result<(Vec<Var>, Var)> {
        let deepest = self.corr_taps.last().unwrap().index.max(self.content_tap.index);
        let mut at: BTreeMap<usize, Var> = BTreeMap::new();
        at.insert(self.tap.index, x);
        if deepest > self.tap.index {
            let (_, taps) = self
                .backbone
                .forward_graph(g, bp, x, Position::Tap(self.tap.index), Position::Tap(deepest))?;
            for (k, v) in taps.into_iter().enumerate() {
                at.insert(self.tap.index + 1 + k, v);
            }
        }
        let mut grams = Vec::with_capacity(self.corr_taps.len());
        for t in &self.corr_taps {
            let gram = g.gram(at[&t.index])?;
            grams.push(match self.config.gram_normalization {
                GramNormalization::Raw => gram,
                norm => {
                    let (h, w) = t.spatial();
                    g.scale(gram, T::lit(1.0 / norm.divisor(t.channels(), h * w)))
                }
            });
        }
        Ok((grams, at[&self.content_tap.index]))
    }

    /// Statistics of constant features, computed in bounded chunks.
    fn constant_statistics(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let n = x.shape()[0];
        let mut grams: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.corr_taps.len()];
        let mut content = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 50).min(n);
            let chunk = gather(x, &(start..end).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let bp = self.backbone.bind(&mut g, false);
            let xv = g.constant(chunk);
            let (gs, c) = self.statistics(&mut g, &bp, xv)?;
            for (acc, v) in grams.iter_mut().zip(gs) {
                acc.push(g.value(v).clone());
            }
            content.push(g.value(c).clone());
            start = end;
        }
        let stack = |parts: &[Tensor<T>]| Tensor::concat_batch(&parts.iter().collect::<Vec<_>>());
        Ok((grams.iter().map(|p| stack(p)).collect::<Result<_>>()?, stack(&content)?))
    }

    fn prepare(&self, clear: &Tensor<T>, degraded: &Tensor<T>) -> Result<Cache<T>> {
        for (name, t) in [("clear", clear), ("degraded", degraded)] {
            let (_, c, h, w) = t.dims4()?;
            if (c, h, w) != self.tap.output_shape {
                return Err(Error::Shape(format!(
                    "{name} features {:?} do not match tap `{}` {:?}",
                    t.shape(),
                    self.tap.name,
                    self.tap.output_shape
                )));
            }
        }
        let ef = map_batches(degraded, |b| self.g_d2c.forward(b))?;
        let (clear_grams, clear_content) = self.constant_statistics(clear)?;
        let (_, ef_content) = self.constant_statistics(&ef)?;
        Ok(Cache {
            clear: clear.clone(),
            ef,
            clear_grams,
            clear_content,
            ef_content,
        })
    }

    fn targets(&self, cache: &Cache<T>, ci: &[usize], di: &[usize]) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let grams = cache
            .clear_grams
            .iter()
            .map(|all| {
                let picked = gather(all, ci)?;
                match self.config.gram_target {
                    GramTarget::PerSample => Ok(picked),
                    GramTarget::BatchMean | GramTarget::MeanToMean => batch_mean(&picked),
                }
            })
            .collect::<Result<_>>()?;
        let anchor = match self.config.content_anchor {
            ContentAnchor::Ef => gather(&cache.ef_content, di)?,
            ContentAnchor::Cf => batch_mean(&gather(&cache.clear_content, ci)?)?,
        };
        Ok((grams, anchor))
    }

    fn generator_graph(&self, g: &mut Graph<T>, ef: &Tensor<T>, grams: &[Tensor<T>], anchor: &Tensor<T>) -> Result<GenGraph> {
        let cfg = &self.config;
        let p = self.g_e2c.bind(g, true);
        let bp = self.backbone.bind(g, false);
        let dp = self.d_c.bind(g, false);
        let x = g.constant(ef.clone());
        let enhanced = self.g_e2c.forward_graph(g, &p, x)?;
        let (gen_grams, content_feat) = self.statistics(g, &bp, enhanced)?;
        let mut corr = Vec::with_capacity(grams.len());
        for (gv, target) in gen_grams.iter().zip(grams) {
            let tv = g.constant(target.clone());
            let gv = match cfg.gram_target {
                GramTarget::MeanToMean => g.mean_batch(*gv)?,
                _ => *gv,
            };
            corr.push(correlation_term_graph(g, gv, tv, cfg.correlation_mode)?);
        }
        let weighted: Vec<(Var, T)> = corr
            .iter()
            .zip(&cfg.layer_weights)
            .map(|(v, w)| (*v, T::lit(*w)))
            .collect();
        let corr_total = g.weighted_sum(&weighted)?;
        let anchor_v = g.constant(anchor.clone());
        let content = g.mean_abs_diff(content_feat, anchor_v)?;
        let logits = self.d_c.forward_graph(g, &dp, enhanced)?;
        let adv = adv_g_graph(g, logits, cfg.gan_mode);
        let total = g.weighted_sum(&[
            (corr_total, T::lit(cfg.lambda_corr)),
            (adv, T::lit(cfg.lambda_adv)),
            (content, T::lit(cfg.lambda_content)),
        ])?;
        Ok(GenGraph {
            p,
            enhanced,
            corr,
            corr_total,
            adv,
            content,
            total,
        })
    }

    fn read_losses(g: &Graph<T>, gg: &GenGraph) -> Stage2Losses {
        let v = |x: Var| g.value(x).item().as_f64();
        Stage2Losses {
            correlation_per_tap: gg.corr.iter().map(|x| v(*x)).collect(),
            correlation: v(gg.corr_total),
            adv: v(gg.adv),
            content: v(gg.content),
            total: v(gg.total),
        }
    }

    /// Losses and gradient of the total wrt `G_E2C` for a Stage-1 output
    /// batch `ef`, clear features `clear` (Gram targets and CF anchor) and,
    /// for the EF anchor, `ef` itself.
    pub fn generator_gradients(&self, ef: &Tensor<T>, clear: &Tensor<T>) -> Result<(Stage2Losses, Vec<Tensor<T>>)> {
        let (grams, anchor) = self.direct_targets(ef, clear)?;
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, ef, &grams, &anchor)?;
        let grads = g.backward(gg.total)?;
        let out = gg
            .p
            .iter()
            .zip(self.g_e2c.params().tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((Self::read_losses(&g, &gg), out))
    }

    pub fn generator_losses(&self, ef: &Tensor<T>, clear: &Tensor<T>) -> Result<Stage2Losses> {
        let (grams, anchor) = self.direct_targets(ef, clear)?;
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, ef, &grams, &anchor)?;
        Ok(Self::read_losses(&g, &gg))
    }

    fn direct_targets(&self, ef: &Tensor<T>, clear: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (cg, cc) = self.constant_statistics(clear)?;
        let (_, ec) = self.constant_statistics(ef)?;
        let cache = Cache {
            clear: clear.clone(),
            ef: ef.clone(),
            clear_grams: cg,
            clear_content: cc,
            ef_content: ec,
        };
        let ci: Vec<usize> = (0..clear.shape()[0]).collect();
        let di: Vec<usize> = (0..ef.shape()[0]).collect();
        self.targets(&cache, &ci, &di)
    }

    fn step_cached(&mut self, cache: &Cache<T>, ci: &[usize], di: &[usize], epoch: usize) -> Result<Stage2Breakdown> {
        let factor = self.config.schedule.factor(epoch, self.config.epochs.max(1));
        let (lr_g, lr_d) = (self.config.lr_g * factor, self.config.lr_d * factor);
        let ef = gather(&cache.ef, di)?;
        let (grams, anchor) = self.targets(cache, ci, di)?;
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, &ef, &grams, &anchor)?;
        let gl = Self::read_losses(&g, &gg);
        if !gl.total.is_finite() {
            return Err(non_finite("stage-2 generator loss", self.step, self.config.seed, ci, di));
        }
        let grads = g.backward(gg.total)?;
        self.opt_g.update(self.g_e2c.params_mut(), &gg.p, &grads, lr_g);
        let fake = self.pool.query(g.value(gg.enhanced))?;
        drop(grads);
        drop(g);

        let real = gather(&cache.clear, ci)?;
        let mut g = Graph::new();
        let dp = self.d_c.bind(&mut g, true);
        let rv = g.constant(real);
        let fv = g.constant(fake);
        let lr_ = self.d_c.forward_graph(&mut g, &dp, rv)?;
        let lf = self.d_c.forward_graph(&mut g, &dp, fv)?;
        let dl = adv_d_graph(&mut g, lr_, lf, self.config.gan_mode)?;
        let total_d = g.value(dl).item().as_f64();
        if !total_d.is_finite() {
            return Err(non_finite("stage-2 discriminator loss", self.step, self.config.seed, ci, di));
        }
        let grads = g.backward(dl)?;
        self.opt_d.update(self.d_c.params_mut(), &dp, &grads, lr_d);

        let b = Stage2Breakdown {
            step: self.step,
            epoch,
            lr_g,
            lr_d,
            correlation_per_tap: gl.correlation_per_tap,
            correlation: gl.correlation,
            adv: gl.adv,
            content: gl.content,
            total_g: gl.total,
            total_d,
        };
        if !b.all_finite() {
            return Err(non_finite("stage-2 loss", self.step, self.config.seed, ci, di));
        }
        self.step += 1;
        Ok(b)
    }

    /// Runs the configured number of epochs on features at the enhancement
    /// tap; `degraded` is raw degraded features, enhanced by `G_D2C` here.
    pub fn fit(&mut self, clear: &Tensor<T>, degraded: &Tensor<T>, outputs: &RunOutputs) -> Result<Vec<Stage2Breakdown>> {
        let g_d2c_before = self.g_d2c.checksum();
        let cache = self.prepare(clear, degraded)?;
        let (nc, nd) = (clear.shape()[0], degraded.shape()[0]);
        let mut sampler = UnpairedSampler::new(nc, nd, sub_seed(self.config.seed, 140), true)?;
        let batch = self.config.batch;
        let steps_per_epoch = nc.max(nd).div_ceil(batch);
        let mut log = match &outputs.loss_log {
            Some(p) => LossLog::create(p)?,
            None => LossLog::disabled(),
        };
        let mut history = Vec::with_capacity(self.config.epochs * steps_per_epoch);
        for epoch in 0..self.config.epochs {
            for _ in 0..steps_per_epoch {
                let (ci, di) = sampler.next_indices(batch)?;
                let b = match self.step_cached(&cache, &ci, &di, epoch) {
                    Err(e) => {
                        log.flush()?;
                        return Err(e);
                    }
                    Ok(b) => b,
                };
                log.write(&b)?;
                history.push(b);
            }
            if let Some(b) = history.last() {
                log::info!(
                    "stage-2 epoch {epoch}: G {:.4} corr {:.4} content {:.4} D {:.4}",
                    b.total_g,
                    b.correlation,
                    b.content,
                    b.total_d
                );
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 {
                    self.checkpoint().save(&dir.join(format!("stage2_epoch{:04}.ufem", epoch + 1)))?;
                }
            }
        }
        log.flush()?;
        debug_assert_eq!(g_d2c_before, self.g_d2c.checksum());
        Ok(history)
    }
}

fn batch_mean<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let m = g.mean_batch(v)?;
    Ok(g.value(m).clone())
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome<T: Real = f32> {
    pub checkpoint: Stage2Checkpoint<T>,
    pub log: Vec<Stage2Breakdown>,
}

/// Trains from features already extracted at `tap`.
pub fn train_stage2_features<T: Real>(
    config: &Stage2Config,
    clear: &Tensor<T>,
    degraded: &Tensor<T>,
    backbone: &BackboneHandle<T>,
    tap: &TapPoint,
    g_d2c: &Generator<T>,
    outputs: &RunOutputs,
) -> Result<Stage2Outcome<T>> {
    let mut trainer = Stage2Trainer::new(config, backbone, tap, g_d2c)?;
    let log = trainer.fit(clear, degraded, outputs)?;
    Ok(Stage2Outcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}

pub fn train_stage2_images<T: Real>(
    config: &Stage2Config,
    clear: &[RgbImage],
    degraded: &[RgbImage],
    backbone: &BackboneHandle<T>,
    stage1: &Stage1Checkpoint<T>,
    outputs: &RunOutputs,
) -> Result<Stage2Outcome<T>> {
    config.validate()?;
    require_frozen(backbone)?;
    stage1.check_backbone(backbone)?;
    let fc = extract_tap_features(backbone, clear, &stage1.tap)?;
    let fd = extract_tap_features(backbone, degraded, &stage1.tap)?;
    train_stage2_features(config, &fc, &fd, backbone, &stage1.tap, &stage1.g_d2c, outputs)
}

pub fn train_stage2<T: Real>(
    config: &Stage2Config,
    clear_manifest: &DatasetManifest,
    degraded_manifest: &DatasetManifest,
    backbone: &BackboneHandle<T>,
    stage1: &Stage1Checkpoint<T>,
) -> Result<Stage2Checkpoint<T>> {
    let clear = load_nonempty(clear_manifest, "clear")?;
    let degraded = load_nonempty(degraded_manifest, "degraded")?;
    Ok(train_stage2_images(config, &clear, &degraded, backbone, stage1, &RunOutputs::default())?.checkpoint)
}

impl<T: Real> Stage2Checkpoint<T> {
    /// Errors unless this checkpoint continues `stage1`.
    pub fn check_stage1(&self, stage1: &Stage1Checkpoint<T>) -> Result<()> {
        if self.tap.name != stage1.tap.name {
            return Err(Error::Incompatible(format!(
                "stage-1 enhances at `{}` but stage-2 at `{}`",
                stage1.tap.name, self.tap.name
            )));
        }
        if self.backbone_id != stage1.backbone_id || self.backbone_checksum != stage1.backbone_checksum {
            return Err(Error::Incompatible(format!(
                "stage-1 backbone {} ({}) differs from stage-2 backbone {} ({})",
                stage1.backbone_id,
                short(&stage1.backbone_checksum),
                self.backbone_id,
                short(&self.backbone_checksum)
            )));
        }
        Ok(())
    }
}
