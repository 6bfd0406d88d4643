//! Loss terms of both training stages.
//!
//! Every term has a graph form used by the trainers and a tensor form that
//! evaluates the same graph once, for reporting and tests. L1 terms are
//! mean-reduced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Squared error to 1 (real) and 0 (fake) on raw logits.
    #[default]
    LeastSquares,
    /// Binary cross-entropy on sigmoid(logits).
    VanillaLog,
}

/// Discriminator loss: real logits pushed to 1, fake to 0.
pub fn adv_d_graph<T: Real>(g: &mut Graph<T>, real: Var, fake: Var, mode: GanMode) -> Result<Var> {
    let (r, f) = match mode {
        GanMode::LeastSquares => (g.mean_sq_to(real, T::one()), g.mean_sq_to(fake, T::zero())),
        GanMode::VanillaLog => (g.bce_with_logits(real, T::one()), g.bce_with_logits(fake, T::zero())),
    };
    g.add(r, f)
}

/// Generator loss: fake logits pushed to 1.
pub fn adv_g_graph<T: Real>(g: &mut Graph<T>, fake: Var, mode: GanMode) -> Var {
    match mode {
        GanMode::LeastSquares => g.mean_sq_to(fake, T::one()),
        GanMode::VanillaLog => g.bce_with_logits(fake, T::one()),
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            step: 0,
            batch_seed: 0,
        })
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// (loss_D, loss_G) for one discriminator.
pub fn adversarial_loss<T: Real>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>, mode: GanMode) -> Result<(f64, f64)> {
    check_finite(real_logits, "real logits")?;
    check_finite(fake_logits, "fake logits")?;
    let mut g = Graph::new();
    let r = g.constant(real_logits.clone());
    let f = g.constant(fake_logits.clone());
    let d = adv_d_graph(&mut g, r, f, mode)?;
    let gl = adv_g_graph(&mut g, f, mode);
    Ok((g.value(d).item().as_f64(), g.value(gl).item().as_f64()))
}

fn mean_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let l = g.mean_abs_diff(av, bv)?;
    Ok(g.value(l).item().as_f64())
}

/// Mean |x − x_rec|.
pub fn cycle_loss<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<f64> {
    mean_l1(x, x_rec)
}

/// Mean |x − G(x)| for a generator mapping into x's own domain.
pub fn identity_loss<T: Real>(x: &Tensor<T>, g_of_x: &Tensor<T>) -> Result<f64> {
    mean_l1(x, g_of_x)
}

/// Mean |C(EF̃) − C(anchor)| at the content tap.
pub fn content_loss<T: Real>(anchor: &Tensor<T>, enhanced: &Tensor<T>) -> Result<f64> {
    mean_l1(anchor, enhanced)
}

/// Σ w_l · L_l.
pub fn multi_adversarial_loss(per_layer: &[f64], weights: &[f64]) -> Result<f64> {
    if per_layer.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} adversarial terms but {} weights",
            per_layer.len(),
            weights.len()
        )));
    }
    Ok(per_layer.iter().zip(weights).map(|(l, w)| l * w).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Components {
    pub mul_adv: f64,
    pub cyc: f64,
    pub idt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Lambdas {
    pub mul_adv: f64,
    pub cyc: f64,
    pub idt: f64,
}

impl Default for Stage1Lambdas {
    fn default() -> Self {
        Self {
            mul_adv: 5.0,
            cyc: 10.0,
            idt: 5.0,
        }
    }
}

pub fn stage1_objective(c: Stage1Components, l: Stage1Lambdas) -> f64 {
    l.mul_adv * c.mul_adv + l.cyc * c.cyc + l.idt * c.idt
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Components {
    pub correlation: f64,
    pub adv: f64,
    pub content: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Lambdas {
    pub correlation: f64,
    pub adv: f64,
    pub content: f64,
}

impl Default for Stage2Lambdas {
    fn default() -> Self {
        Self {
            correlation: 1000.0,
            adv: 5.0,
            content: 10.0,
        }
    }
}

pub fn stage2_objective(c: Stage2Components, l: Stage2Lambdas) -> f64 {
    l.correlation * c.correlation + l.adv * c.adv + l.content * c.content
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Mean absolute entry difference.
    #[default]
    L1,
    /// KL(target ‖ generated) between rows normalized by absolute row sums.
    Kl,
    /// 1 − cosine similarity of the flattened matrices.
    Cosine,
}

/// Smoothing added to absolute entries before row normalization (KL mode).
pub const KL_EPS: f64 = 1e-8;

/// One layer's distance between generated Grams (N, C, C) and a target of
/// shape (C, C) (broadcast) or (N, C, C).
pub fn correlation_term_graph<T: Real>(g: &mut Graph<T>, generated: Var, target: Var, mode: CorrelationMode) -> Result<Var> {
    match mode {
        CorrelationMode::L1 => g.mean_abs_diff(generated, target),
        CorrelationMode::Kl => g.row_kl(generated, target, T::lit(KL_EPS)),
        CorrelationMode::Cosine => {
            let gs = g.shape(generated).to_vec();
            let ts = g.shape(target).to_vec();
            let (n, c) = match gs.as_slice() {
                [n, c, _] => (*n, *c),
                [c, _] => (1, *c),
                _ => return Err(Error::Shape(format!("Gram expected, got {gs:?}"))),
            };
            let gen = g.reshape(generated, &[n, c * c])?;
            let tgt = if ts.len() == 3 {
                g.reshape(target, &[ts[0], c * c])?
            } else {
                g.reshape(target, &[c * c])?
            };
            g.cosine_distance(gen, tgt)
        }
    }
}

/// Σ_l w_l · d(G_l, Ĝ_l) over per-layer Gram tensors.
pub fn correlation_loss<T: Real>(
    generated: &[Tensor<T>],
    target: &[Tensor<T>],
    weights: &[f64],
    mode: CorrelationMode,
) -> Result<f64> {
    if generated.len() != target.len() || generated.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} generated, {} target Gram layers and {} weights",
            generated.len(),
            target.len(),
            weights.len()
        )));
    }
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for ((a, b), w) in generated.iter().zip(target).zip(weights) {
        let inner = |s: &[usize]| s[s.len().saturating_sub(2)..].to_vec();
        if a.shape().len() < 2 || inner(a.shape()) != inner(b.shape()) {
            return Err(Error::Shape(format!("Gram shapes {:?} vs {:?}", a.shape(), b.shape())));
        }
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        terms.push((correlation_term_graph(&mut g, av, bv, mode)?, T::lit(*w)));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(g.value(total).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn least_squares_optimum_is_zero() {
        let (d, g) = adversarial_loss(&t(&[2, 1, 2, 2], 1.0), &t(&[2, 1, 2, 2], 0.0), GanMode::LeastSquares).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(g, 1.0);
    }

    #[test]
    fn balanced_vanilla_discriminator() {
        let (d, g) = adversarial_loss(&t(&[4], 0.0), &t(&[4], 0.0), GanMode::VanillaLog).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((g - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn nan_logits_are_rejected() {
        assert!(adversarial_loss(&t(&[2], f64::NAN), &t(&[2], 0.0), GanMode::LeastSquares).is_err());
    }

    #[test]
    fn l1_terms() {
        assert_eq!(cycle_loss(&t(&[2, 3], 0.0), &t(&[2, 3], 1.0)).unwrap(), 1.0);
        assert_eq!(identity_loss(&t(&[2, 3], 0.5), &t(&[2, 3], 0.5)).unwrap(), 0.0);
        assert!(cycle_loss(&t(&[2, 3], 0.0), &t(&[3, 2], 0.0)).is_err());
    }

    #[test]
    fn weighted_sums() {
        let m = multi_adversarial_loss(&[1.0, 2.0, 3.0], &[0.5, 0.3, 0.2]).unwrap();
        assert!((m - 1.7).abs() < 1e-15);
        let c = Stage1Components {
            mul_adv: 1.0,
            cyc: 1.0,
            idt: 1.0,
        };
        assert_eq!(stage1_objective(c, Stage1Lambdas::default()), 20.0);
        let c2 = Stage2Components {
            correlation: 0.001,
            adv: 1.0,
            content: 1.0,
        };
        assert_eq!(stage2_objective(c2, Stage2Lambdas::default()), 16.0);
    }

    #[test]
    fn correlation_uniform_difference() {
        let l = correlation_loss(&[t(&[3, 3], 5.0)], &[t(&[3, 3], 3.0)], &[1.0], CorrelationMode::L1).unwrap();
        assert_eq!(l, 2.0);
        let same = correlation_loss(&[t(&[2, 2], 1.5)], &[t(&[2, 2], 1.5)], &[1.0], CorrelationMode::Kl).unwrap();
        assert!(same.abs() < 1e-12);
        let cos = correlation_loss(&[t(&[1, 2, 2], 1.5)], &[t(&[2, 2], 3.0)], &[1.0], CorrelationMode::Cosine).unwrap();
        assert!(cos.abs() < 1e-12);
    }
}
