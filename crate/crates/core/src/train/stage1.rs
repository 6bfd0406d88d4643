//! Stage 1: dual generators between the degraded and clear feature domains.
//!
//! `G_D2C` maps degraded features to clear ones and `G_C2D` the reverse.
//! The clear direction is judged at the enhancement tap and the two taps
//! after it, reached by pushing generated features through the frozen deep
//! layers. The degraded direction has one discriminator at the enhancement
//! tap unless `multi_scale_degraded` is set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::{adv_d_graph, adv_g_graph, GanMode, Stage1Lambdas};
use super::{
    extract_tap_features, gather, non_finite, require_frozen, sub_seed, HistoryBuffer, LossLog, RunOutputs, Schedule,
};
use crate::backbone::{BackboneHandle, Position, TapPoint};
use crate::container::Container;
use crate::data::image::RgbImage;
use crate::data::manifest::DatasetManifest;
use crate::data::sampler::UnpairedSampler;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::tensor::{Real, Tensor};

pub const STAGE1_ID: &str = "ufem.stage1";

/// Number of discriminator scales in the clear direction.
pub const SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub lambda_mul_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_idt: f64,
    /// Weights of the enhancement tap and the two taps after it.
    pub adv_weights: Vec<f64>,
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
    /// `|X_D − G_C2D(X_D)|`.
    pub identity_degraded: bool,
    /// `|X_C − G_D2C(X_C)|`.
    pub identity_clear: bool,
    /// Give the degraded direction discriminators at all three taps.
    pub multi_scale_degraded: bool,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Channel count, feature size and seed are filled in from the tap and
    /// `seed`.
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda_mul_adv: 5.0,
            lambda_cyc: 10.0,
            lambda_idt: 5.0,
            adv_weights: vec![0.5, 0.3, 0.2],
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
            identity_degraded: true,
            identity_clear: true,
            multi_scale_degraded: false,
            checkpoint_every: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_mul_adv, self.lambda_cyc, self.lambda_idt];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("stage-1 lambdas must be finite and non-negative, got {lambdas:?}")));
        }
        check_weights(&self.adv_weights)?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Stage1Lambdas {
        Stage1Lambdas {
            mul_adv: self.lambda_mul_adv,
            cyc: self.lambda_cyc,
            idt: self.lambda_idt,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    fn generator_spec(&self, tap: &TapPoint, k: u64) -> GeneratorSpec {
        GeneratorSpec {
            in_channels: tap.channels(),
            feature_hw: tap.spatial(),
            seed: sub_seed(self.seed, k),
            ..self.generator.clone()
        }
    }

    fn discriminator_spec(&self, tap: &TapPoint, k: u64) -> DiscriminatorSpec {
        DiscriminatorSpec {
            in_channels: tap.channels(),
            feature_hw: tap.spatial(),
            seed: sub_seed(self.seed, k),
            ..self.discriminator.clone()
        }
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.len() != SCALES || w.iter().any(|x| !x.is_finite() || *x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "adv_weights must be {SCALES} non-negative values summing to 1, got {w:?}"
        )));
    }
    Ok(())
}

/// The enhancement tap and the two taps after it.
pub fn discriminator_taps<T: Real>(backbone: &BackboneHandle<T>, enhancement_tap: &TapPoint) -> Result<[TapPoint; 3]> {
    let t0 = backbone.tap(&enhancement_tap.name)?.clone();
    let t1 = backbone.successor(&t0).cloned();
    let t2 = t1.as_ref().and_then(|t| backbone.successor(t)).cloned();
    match (t1, t2) {
        (Some(t1), Some(t2)) => Ok([t0, t1, t2]),
        _ => Err(Error::Config(format!(
            "tap `{}` needs two deeper taps for the multi-adversarial discriminators",
            t0.name
        ))),
    }
}

/// Per-step losses. Adversarial entries are the generator-side terms per
/// scale; `d_*` entries are the discriminator losses per scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub epoch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adv_clear: Vec<f64>,
    pub adv_degraded: Vec<f64>,
    pub mul_adv: f64,
    pub cyc_degraded: f64,
    pub cyc_clear: f64,
    pub cyc: f64,
    pub idt_degraded: f64,
    pub idt_clear: f64,
    pub idt: f64,
    pub total_g: f64,
    pub d_clear: Vec<f64>,
    pub d_degraded: Vec<f64>,
    pub total_d: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.mul_adv,
            self.cyc,
            self.idt,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .chain(&self.adv_clear)
        .chain(&self.adv_degraded)
        .chain(&self.d_clear)
        .chain(&self.d_degraded)
        .all(|x| x.is_finite())
    }
}

/// Generator-side loss values of one batch, before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLosses {
    pub adv_clear: Vec<f64>,
    pub adv_degraded: Vec<f64>,
    pub mul_adv: f64,
    pub cyc_degraded: f64,
    pub cyc_clear: f64,
    pub idt_degraded: f64,
    pub idt_clear: f64,
    pub total: f64,
}

struct GenGraph {
    p_d2c: Vec<Var>,
    p_c2d: Vec<Var>,
    fake_c: Var,
    fake_d: Var,
    adv_c: Vec<Var>,
    adv_d: Vec<Var>,
    mul_adv: Var,
    cyc: [Var; 2],
    idt: [Option<Var>; 2],
    total: Var,
}

#[derive(Clone, Debug)]
pub struct Stage1Checkpoint<T: Real = f32> {
    pub config: Stage1Config,
    pub step: usize,
    pub tap: TapPoint,
    pub backbone_id: String,
    pub backbone_checksum: String,
    pub g_d2c: Generator<T>,
    pub g_c2d: Generator<T>,
    pub d_c: Vec<Discriminator<T>>,
    pub d_d: Vec<Discriminator<T>>,
}

#[derive(Serialize, Deserialize)]
struct Stage1Meta {
    config: Stage1Config,
    step: usize,
    tap: TapPoint,
    backbone_id: String,
    backbone_checksum: String,
    g_d2c: GeneratorSpec,
    g_c2d: GeneratorSpec,
    d_c: Vec<DiscriminatorSpec>,
    d_d: Vec<DiscriminatorSpec>,
}

impl<T: Real> Stage1Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container<T>> {
        let mut ps = ParamSet::new();
        ps.extend_prefixed("g_d2c", self.g_d2c.params());
        ps.extend_prefixed("g_c2d", self.g_c2d.params());
        for (i, d) in self.d_c.iter().enumerate() {
            ps.extend_prefixed(&format!("d_c{i}"), d.params());
        }
        for (i, d) in self.d_d.iter().enumerate() {
            ps.extend_prefixed(&format!("d_d{i}"), d.params());
        }
        let meta = Stage1Meta {
            config: self.config.clone(),
            step: self.step,
            tap: self.tap.clone(),
            backbone_id: self.backbone_id.clone(),
            backbone_checksum: self.backbone_checksum.clone(),
            g_d2c: self.g_d2c.spec.clone(),
            g_c2d: self.g_c2d.spec.clone(),
            d_c: self.d_c.iter().map(|d| d.spec.clone()).collect(),
            d_d: self.d_d.iter().map(|d| d.spec.clone()).collect(),
        };
        Ok(Container::new(STAGE1_ID, serde_json::to_value(meta)?, ps))
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.architecture_id != STAGE1_ID {
            return Err(Error::Incompatible(format!(
                "expected a stage-1 checkpoint, found '{}'",
                c.architecture_id
            )));
        }
        let meta: Stage1Meta = serde_json::from_value(c.metadata.clone())?;
        let discs = |specs: &[DiscriminatorSpec], prefix: &str| -> Result<Vec<Discriminator<T>>> {
            specs
                .iter()
                .enumerate()
                .map(|(i, s)| Discriminator::from_parts(s, &c.tensors.with_prefix(&format!("{prefix}{i}"))))
                .collect()
        };
        Ok(Self {
            g_d2c: Generator::from_parts(&meta.g_d2c, &c.tensors.with_prefix("g_d2c"))?,
            g_c2d: Generator::from_parts(&meta.g_c2d, &c.tensors.with_prefix("g_c2d"))?,
            d_c: discs(&meta.d_c, "d_c")?,
            d_d: discs(&meta.d_d, "d_d")?,
            config: meta.config,
            step: meta.step,
            tap: meta.tap,
            backbone_id: meta.backbone_id,
            backbone_checksum: meta.backbone_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Errors unless this checkpoint was trained against `backbone`.
    pub fn check_backbone(&self, backbone: &BackboneHandle<T>) -> Result<()> {
        if self.backbone_id != backbone.architecture_id || self.backbone_checksum != backbone.checksum() {
            return Err(Error::Incompatible(format!(
                "stage-1 checkpoint was trained on backbone {} ({}), not {} ({})",
                self.backbone_id,
                short(&self.backbone_checksum),
                backbone.architecture_id,
                short(&backbone.checksum())
            )));
        }
        backbone.tap(&self.tap.name).map(|_| ())
    }
}

pub(crate) fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

pub struct Stage1Trainer<'a, T: Real = f32> {
    pub config: Stage1Config,
    backbone: &'a BackboneHandle<T>,
    taps: [TapPoint; 3],
    pub g_d2c: Generator<T>,
    pub g_c2d: Generator<T>,
    pub d_c: Vec<Discriminator<T>>,
    pub d_d: Vec<Discriminator<T>>,
    opt_d2c: Adam<T>,
    opt_c2d: Adam<T>,
    opt_dc: Vec<Adam<T>>,
    opt_dd: Vec<Adam<T>>,
    pool_c: HistoryBuffer<T>,
    pool_d: HistoryBuffer<T>,
    step: usize,
}

impl<'a, T: Real> Stage1Trainer<'a, T> {
    pub fn new(config: &Stage1Config, backbone: &'a BackboneHandle<T>, tap: &TapPoint) -> Result<Self> {
        config.validate()?;
        require_frozen(backbone)?;
        let taps = discriminator_taps(backbone, tap)?;
        let g_d2c = Generator::new(&config.generator_spec(&taps[0], 1))?;
        let g_c2d = Generator::new(&config.generator_spec(&taps[0], 2))?;
        let d_c: Vec<Discriminator<T>> = taps
            .iter()
            .enumerate()
            .map(|(i, t)| Discriminator::new(&config.discriminator_spec(t, 10 + i as u64)))
            .collect::<Result<_>>()?;
        let n_dd = if config.multi_scale_degraded { SCALES } else { 1 };
        let d_d: Vec<Discriminator<T>> = taps[..n_dd]
            .iter()
            .enumerate()
            .map(|(i, t)| Discriminator::new(&config.discriminator_spec(t, 20 + i as u64)))
            .collect::<Result<_>>()?;
        let gcfg = config.adam(config.lr_g);
        let dcfg = config.adam(config.lr_d);
        Ok(Self {
            opt_d2c: Adam::new(g_d2c.params(), gcfg),
            opt_c2d: Adam::new(g_c2d.params(), gcfg),
            opt_dc: d_c.iter().map(|d| Adam::new(d.params(), dcfg)).collect(),
            opt_dd: d_d.iter().map(|d| Adam::new(d.params(), dcfg)).collect(),
            pool_c: HistoryBuffer::new(config.history_buffer, sub_seed(config.seed, 30)),
            pool_d: HistoryBuffer::new(config.history_buffer, sub_seed(config.seed, 31)),
            config: config.clone(),
            backbone,
            taps,
            g_d2c,
            g_c2d,
            d_c,
            d_d,
            step: 0,
        })
    }

    pub fn taps(&self) -> &[TapPoint; 3] {
        &self.taps
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Stage1Checkpoint<T> {
        Stage1Checkpoint {
            config: self.config.clone(),
            step: self.step,
            tap: self.taps[0].clone(),
            backbone_id: self.backbone.architecture_id.clone(),
            backbone_checksum: self.backbone.checksum(),
            g_d2c: self.g_d2c.clone(),
            g_c2d: self.g_c2d.clone(),
            d_c: self.d_c.clone(),
            d_d: self.d_d.clone(),
        }
    }

    /// Features at the enhancement tap followed by those at the next
    /// `extra` taps, all differentiable wrt `x`.
    fn scales(&self, g: &mut Graph<T>, bp: &[Var], x: Var, extra: usize) -> Result<Vec<Var>> {
        let mut out = vec![x];
        if extra > 0 {
            let (_, taps) = self.backbone.forward_graph(
                g,
                bp,
                x,
                Position::Tap(self.taps[0].index),
                Position::Tap(self.taps[extra].index),
            )?;
            out.extend(taps);
        }
        Ok(out)
    }

    fn weights_for(&self, n: usize) -> Vec<f64> {
        if n == 1 {
            vec![1.0]
        } else {
            self.config.adv_weights.clone()
        }
    }

    fn generator_graph(&self, g: &mut Graph<T>, xc: &Tensor<T>, xd: &Tensor<T>) -> Result<GenGraph> {
        let cfg = &self.config;
        let p_d2c = self.g_d2c.bind(g, true);
        let p_c2d = self.g_c2d.bind(g, true);
        let bp = self.backbone.bind(g, false);
        let xc = g.constant(xc.clone());
        let xd = g.constant(xd.clone());

        let fake_c = self.g_d2c.forward_graph(g, &p_d2c, xd)?;
        let rec_d = self.g_c2d.forward_graph(g, &p_c2d, fake_c)?;
        let fake_d = self.g_c2d.forward_graph(g, &p_c2d, xc)?;
        let rec_c = self.g_d2c.forward_graph(g, &p_d2c, fake_d)?;

        let adv = |g: &mut Graph<T>, fake: Var, discs: &[Discriminator<T>]| -> Result<Vec<Var>> {
            let feats = self.scales(g, &bp, fake, discs.len() - 1)?;
            discs
                .iter()
                .zip(feats)
                .map(|(d, f)| {
                    let dp = d.bind(g, false);
                    let logits = d.forward_graph(g, &dp, f)?;
                    Ok(adv_g_graph(g, logits, cfg.gan_mode))
                })
                .collect()
        };
        let adv_c = adv(g, fake_c, &self.d_c)?;
        let adv_d = adv(g, fake_d, &self.d_d)?;
        let mut terms: Vec<(Var, T)> = Vec::new();
        for (v, w) in adv_c.iter().zip(self.weights_for(adv_c.len())) {
            terms.push((*v, T::lit(w)));
        }
        for (v, w) in adv_d.iter().zip(self.weights_for(adv_d.len())) {
            terms.push((*v, T::lit(w)));
        }
        let mul_adv = g.weighted_sum(&terms)?;

        let cyc = [g.mean_abs_diff(rec_d, xd)?, g.mean_abs_diff(rec_c, xc)?];
        let idt_d = if cfg.identity_degraded {
            let same = self.g_c2d.forward_graph(g, &p_c2d, xd)?;
            Some(g.mean_abs_diff(same, xd)?)
        } else {
            None
        };
        let idt_c = if cfg.identity_clear {
            let same = self.g_d2c.forward_graph(g, &p_d2c, xc)?;
            Some(g.mean_abs_diff(same, xc)?)
        } else {
            None
        };

        let lam_cyc = T::lit(cfg.lambda_cyc);
        let lam_idt = T::lit(cfg.lambda_idt);
        let mut total_terms = vec![(mul_adv, T::lit(cfg.lambda_mul_adv)), (cyc[0], lam_cyc), (cyc[1], lam_cyc)];
        total_terms.extend(idt_d.map(|v| (v, lam_idt)));
        total_terms.extend(idt_c.map(|v| (v, lam_idt)));
        let total = g.weighted_sum(&total_terms)?;
        Ok(GenGraph {
            p_d2c,
            p_c2d,
            fake_c,
            fake_d,
            adv_c,
            adv_d,
            mul_adv,
            cyc,
            idt: [idt_d, idt_c],
            total,
        })
    }

    fn read_losses(g: &Graph<T>, gg: &GenGraph) -> GeneratorLosses {
        let v = |x: Var| g.value(x).item().as_f64();
        let opt = |x: Option<Var>| x.map(v).unwrap_or(0.0);
        GeneratorLosses {
            adv_clear: gg.adv_c.iter().map(|x| v(*x)).collect(),
            adv_degraded: gg.adv_d.iter().map(|x| v(*x)).collect(),
            mul_adv: v(gg.mul_adv),
            cyc_degraded: v(gg.cyc[0]),
            cyc_clear: v(gg.cyc[1]),
            idt_degraded: opt(gg.idt[0]),
            idt_clear: opt(gg.idt[1]),
            total: v(gg.total),
        }
    }

    /// Generator losses and the gradient of the total wrt every parameter
    /// of `G_D2C` and `G_C2D`, without updating anything.
    pub fn generator_gradients(
        &self,
        xc: &Tensor<T>,
        xd: &Tensor<T>,
    ) -> Result<(GeneratorLosses, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, xc, xd)?;
        let grads = g.backward(gg.total)?;
        let collect = |vars: &[Var], ps: &ParamSet<T>| -> Vec<Tensor<T>> {
            vars.iter()
                .zip(ps.tensors())
                .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        let a = collect(&gg.p_d2c, self.g_d2c.params());
        let b = collect(&gg.p_c2d, self.g_c2d.params());
        Ok((Self::read_losses(&g, &gg), a, b))
    }

    /// Generator losses of one batch.
    pub fn generator_losses(&self, xc: &Tensor<T>, xd: &Tensor<T>) -> Result<GeneratorLosses> {
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, xc, xd)?;
        Ok(Self::read_losses(&g, &gg))
    }

    fn discriminator_update(
        &mut self,
        xc: &Tensor<T>,
        xd: &Tensor<T>,
        fake_c: &Tensor<T>,
        fake_d: &Tensor<T>,
        lr: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let fake_c = self.pool_c.query(fake_c)?;
        let fake_d = self.pool_d.query(fake_d)?;
        let mut g = Graph::new();
        let bp = self.backbone.bind(&mut g, false);
        let mode = self.config.gan_mode;
        let side = |g: &mut Graph<T>, real: &Tensor<T>, fake: Tensor<T>, discs: &[Discriminator<T>]| {
            let rv = g.constant(real.clone());
            let fv = g.constant(fake);
            let reals = self.scales(g, &bp, rv, discs.len() - 1)?;
            let fakes = self.scales(g, &bp, fv, discs.len() - 1)?;
            let mut params = Vec::new();
            let mut losses = Vec::new();
            for ((d, r), f) in discs.iter().zip(reals).zip(fakes) {
                let dp = d.bind(g, true);
                let lr_ = d.forward_graph(g, &dp, r)?;
                let lf = d.forward_graph(g, &dp, f)?;
                losses.push(adv_d_graph(g, lr_, lf, mode)?);
                params.push(dp);
            }
            Ok::<_, Error>((params, losses))
        };
        let (pc, lc) = side(&mut g, xc, fake_c, &self.d_c)?;
        let (pd, ld) = side(&mut g, xd, fake_d, &self.d_d)?;
        let all: Vec<(Var, T)> = lc.iter().chain(&ld).map(|v| (*v, T::one())).collect();
        let total = g.weighted_sum(&all)?;
        let vals = |ls: &[Var]| ls.iter().map(|v| g.value(*v).item().as_f64()).collect::<Vec<_>>();
        let (dc, dd) = (vals(&lc), vals(&ld));
        if dc.iter().chain(&dd).all(|x| x.is_finite()) {
            let grads = g.backward(total)?;
            for ((d, opt), p) in self.d_c.iter_mut().zip(&mut self.opt_dc).zip(&pc) {
                opt.update(d.params_mut(), p, &grads, lr);
            }
            for ((d, opt), p) in self.d_d.iter_mut().zip(&mut self.opt_dd).zip(&pd) {
                opt.update(d.params_mut(), p, &grads, lr);
            }
        }
        Ok((dc, dd))
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self, xc: &Tensor<T>, xd: &Tensor<T>, epoch: usize) -> Result<LossBreakdown> {
        let factor = self.config.schedule.factor(epoch, self.config.epochs.max(1));
        let (lr_g, lr_d) = (self.config.lr_g * factor, self.config.lr_d * factor);
        let mut g = Graph::new();
        let gg = self.generator_graph(&mut g, xc, xd)?;
        let gl = Self::read_losses(&g, &gg);
        if !gl.total.is_finite() {
            return Err(Error::NonFinite {
                what: "stage-1 generator loss".into(),
                step: self.step,
                batch_seed: self.config.seed,
            });
        }
        let grads = g.backward(gg.total)?;
        self.opt_d2c.update(self.g_d2c.params_mut(), &gg.p_d2c, &grads, lr_g);
        self.opt_c2d.update(self.g_c2d.params_mut(), &gg.p_c2d, &grads, lr_g);
        let fake_c = g.value(gg.fake_c).clone();
        let fake_d = g.value(gg.fake_d).clone();
        drop(grads);
        drop(g);
        let (d_clear, d_degraded) = self.discriminator_update(xc, xd, &fake_c, &fake_d, lr_d)?;
        let total_d = d_clear.iter().chain(&d_degraded).sum();
        let b = LossBreakdown {
            step: self.step,
            epoch,
            lr_g,
            lr_d,
            adv_clear: gl.adv_clear,
            adv_degraded: gl.adv_degraded,
            mul_adv: gl.mul_adv,
            cyc_degraded: gl.cyc_degraded,
            cyc_clear: gl.cyc_clear,
            cyc: gl.cyc_degraded + gl.cyc_clear,
            idt_degraded: gl.idt_degraded,
            idt_clear: gl.idt_clear,
            idt: gl.idt_degraded + gl.idt_clear,
            total_g: gl.total,
            d_clear,
            d_degraded,
            total_d,
        };
        if !b.all_finite() {
            return Err(Error::NonFinite {
                what: "stage-1 loss".into(),
                step: self.step,
                batch_seed: self.config.seed,
            });
        }
        self.step += 1;
        Ok(b)
    }

    /// Runs the configured number of epochs over cached tap features.
    pub fn fit(&mut self, clear: &Tensor<T>, degraded: &Tensor<T>, outputs: &RunOutputs) -> Result<Vec<LossBreakdown>> {
        for (name, t) in [("clear", clear), ("degraded", degraded)] {
            let (_, c, h, w) = t.dims4()?;
            if (c, h, w) != self.taps[0].output_shape {
                return Err(Error::Shape(format!(
                    "{name} features {:?} do not match tap `{}` {:?}",
                    t.shape(),
                    self.taps[0].name,
                    self.taps[0].output_shape
                )));
            }
        }
        let (nc, nd) = (clear.shape()[0], degraded.shape()[0]);
        let mut sampler = UnpairedSampler::new(nc, nd, sub_seed(self.config.seed, 40), true)?;
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
                let xc = gather(clear, &ci)?;
                let xd = gather(degraded, &di)?;
                let b = match self.step(&xc, &xd, epoch) {
                    Err(Error::NonFinite { what, step, batch_seed }) => {
                        log.flush()?;
                        return Err(non_finite(&what, step, batch_seed, &ci, &di));
                    }
                    r => r?,
                };
                log.write(&b)?;
                history.push(b);
            }
            let last = history.last();
            log::info!(
                "stage-1 epoch {epoch}: G {:.4} D {:.4} cyc {:.4}",
                last.map_or(0.0, |b| b.total_g),
                last.map_or(0.0, |b| b.total_d),
                last.map_or(0.0, |b| b.cyc)
            );
            if let Some(dir) = &outputs.checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 {
                    self.checkpoint().save(&dir.join(format!("stage1_epoch{:04}.ufem", epoch + 1)))?;
                }
            }
        }
        log.flush()?;
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome<T: Real = f32> {
    pub checkpoint: Stage1Checkpoint<T>,
    pub log: Vec<LossBreakdown>,
}

/// Trains from features already extracted at `tap`.
pub fn train_stage1_features<T: Real>(
    config: &Stage1Config,
    clear: &Tensor<T>,
    degraded: &Tensor<T>,
    backbone: &BackboneHandle<T>,
    tap: &TapPoint,
    outputs: &RunOutputs,
) -> Result<Stage1Outcome<T>> {
    let mut trainer = Stage1Trainer::new(config, backbone, tap)?;
    let log = trainer.fit(clear, degraded, outputs)?;
    Ok(Stage1Outcome {
        checkpoint: trainer.checkpoint(),
        log,
    })
}

pub fn train_stage1_images<T: Real>(
    config: &Stage1Config,
    clear: &[RgbImage],
    degraded: &[RgbImage],
    backbone: &BackboneHandle<T>,
    tap: &TapPoint,
    outputs: &RunOutputs,
) -> Result<Stage1Outcome<T>> {
    config.validate()?;
    require_frozen(backbone)?;
    let fc = extract_tap_features(backbone, clear, tap)?;
    let fd = extract_tap_features(backbone, degraded, tap)?;
    train_stage1_features(config, &fc, &fd, backbone, tap, outputs)
}

pub fn train_stage1<T: Real>(
    config: &Stage1Config,
    clear_manifest: &DatasetManifest,
    degraded_manifest: &DatasetManifest,
    backbone: &BackboneHandle<T>,
    enhancement_tap: &TapPoint,
) -> Result<Stage1Checkpoint<T>> {
    let clear = load_nonempty(clear_manifest, "clear")?;
    let degraded = load_nonempty(degraded_manifest, "degraded")?;
    Ok(train_stage1_images(config, &clear, &degraded, backbone, enhancement_tap, &RunOutputs::default())?.checkpoint)
}

pub(crate) fn load_nonempty(m: &DatasetManifest, what: &str) -> Result<Vec<RgbImage>> {
    if m.is_empty() {
        return Err(Error::InsufficientData(format!("{what} manifest is empty")));
    }
    m.load_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone, BackboneSpec, WeightsSource};

    fn backbone() -> BackboneHandle<f32> {
        load_backbone(&BackboneSpec::tinyvgg(WeightsSource::Bundled { seed: 0 })).unwrap()
    }

    #[test]
    fn taps_follow_successors() {
        let b = backbone();
        let t = discriminator_taps(&b, b.tap("block1").unwrap()).unwrap();
        let names: Vec<_> = t.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["block1", "block2", "block3"]);
        assert!(discriminator_taps(&b, b.tap("block4").unwrap()).is_err());
        assert!(discriminator_taps(&b, b.tap("block3").unwrap()).is_err());
    }

    #[test]
    fn weights_must_be_convex() {
        let mut c = Stage1Config::default();
        c.adv_weights = vec![0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        c.adv_weights = vec![1.0, 0.0, 0.0];
        assert!(c.validate().is_ok());
        c.lambda_cyc = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let r: std::result::Result<Stage1Config, _> = serde_json::from_str(r#"{"lamda_cyc": 3}"#);
        assert!(r.is_err());
        let c: Stage1Config = serde_json::from_str(r#"{"lambda_cyc": 3}"#).unwrap();
        assert_eq!(c.lambda_cyc, 3.0);
        assert_eq!(c.lambda_idt, 5.0);
    }
}
