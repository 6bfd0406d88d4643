#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufem_core::backbone::{load_backbone, BackboneHandle, BackboneSpec, WeightsSource};
use ufem_core::nets::{DiscriminatorSpec, GeneratorArch, GeneratorInit, GeneratorSpec};
use ufem_core::params::ParamSet;
use ufem_core::{Real, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bundled<T: Real>(seed: u64) -> BackboneHandle<T> {
    load_backbone(&BackboneSpec::tinyvgg(WeightsSource::Bundled { seed })).unwrap()
}

/// Non-negative features like a post-ReLU tap, no exact zeros.
pub fn positive_features<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::uniform(shape, 0.05, 1.0, &mut rng(seed))
}

pub fn small_generator() -> GeneratorSpec {
    GeneratorSpec {
        architecture: GeneratorArch::FlatResidual,
        base_width: 8,
        residual_blocks: 1,
        init: GeneratorInit::Standard,
        ..Default::default()
    }
}

pub fn small_discriminator() -> DiscriminatorSpec {
    DiscriminatorSpec {
        base_width: 8,
        ..Default::default()
    }
}

pub struct GradCheck {
    pub probed: usize,
    pub worst_relative: f64,
}

/// Central differences on `count` seeded parameter entries of `params`
/// against `analytic`. `loss` is evaluated with the perturbed set in place.
/// Entries whose analytic and numeric gradients are both below `floor`
/// are skipped as uninformative.
pub fn check_gradients(
    params: &mut ParamSet<f64>,
    analytic: &[Tensor<f64>],
    count: usize,
    seed: u64,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> GradCheck {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut r = rng(seed);
    let mut probed = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while probed < count && attempts < 50 * count {
        attempts += 1;
        let ti = r.random_range(0..params.len());
        let n = params.tensor(ti).len();
        let j = r.random_range(0..n);
        let a = analytic[ti].data()[j];
        let orig = params.tensor(ti).data()[j];
        params.tensor_mut(ti).data_mut()[j] = orig + H;
        let up = loss(params);
        params.tensor_mut(ti).data_mut()[j] = orig - H;
        let down = loss(params);
        params.tensor_mut(ti).data_mut()[j] = orig;
        let num = (up - down) / (2.0 * H);
        if a.abs() < FLOOR && num.abs() < FLOOR {
            continue;
        }
        let rel = (a - num).abs() / a.abs().max(num.abs());
        worst = worst.max(rel);
        probed += 1;
    }
    GradCheck {
        probed,
        worst_relative: worst,
    }
}
