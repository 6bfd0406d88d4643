mod common;

use common::*;
use ufem_core::dcp::GramNormalization;
use ufem_core::nets::{Generator, GeneratorSpec};
use ufem_core::train::stage2::GramTarget;
use ufem_core::train::{CorrelationMode, GanMode, Stage1Config, Stage1Trainer, Stage2Config, Stage2Trainer};

const PROBES: usize = 24;
const TOL: f64 = 1e-4;

fn stage1_config(lambdas: (f64, f64, f64), gan_mode: GanMode) -> Stage1Config {
    Stage1Config {
        lambda_mul_adv: lambdas.0,
        lambda_cyc: lambdas.1,
        lambda_idt: lambdas.2,
        gan_mode,
        generator: small_generator(),
        discriminator: small_discriminator(),
        ..Default::default()
    }
}

fn check_stage1(name: &str, cfg: Stage1Config) {
    let backbone = bundled::<f64>(3);
    let tap = backbone.tap("block1").unwrap().clone();
    let mut trainer = Stage1Trainer::new(&cfg, &backbone, &tap).unwrap();
    let xc = positive_features::<f64>(&[2, 16, 16, 16], 1);
    let xd = positive_features::<f64>(&[2, 16, 16, 16], 2);
    let (_, ga, gb) = trainer.generator_gradients(&xc, &xd).unwrap();

    let mut pa = trainer.g_d2c.params().clone();
    let a = check_gradients(&mut pa, &ga, PROBES / 2, 10, |p| {
        trainer.g_d2c.params_mut().load_from(p).unwrap();
        trainer.generator_losses(&xc, &xd).unwrap().total
    });
    trainer.g_d2c.params_mut().load_from(&pa).unwrap();
    let mut pb = trainer.g_c2d.params().clone();
    let b = check_gradients(&mut pb, &gb, PROBES / 2, 11, |p| {
        trainer.g_c2d.params_mut().load_from(p).unwrap();
        trainer.generator_losses(&xc, &xd).unwrap().total
    });
    let probed = a.probed + b.probed;
    let worst = a.worst_relative.max(b.worst_relative);
    assert!(probed >= 20, "{name}: only {probed} informative parameters");
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn stage1_multi_adversarial_least_squares() {
    check_stage1("mul_adv", stage1_config((1.0, 0.0, 0.0), GanMode::LeastSquares));
}

#[test]
fn stage1_multi_adversarial_vanilla() {
    check_stage1("mul_adv vanilla", stage1_config((1.0, 0.0, 0.0), GanMode::VanillaLog));
}

#[test]
fn stage1_cycle() {
    check_stage1("cyc", stage1_config((0.0, 1.0, 0.0), GanMode::LeastSquares));
}

#[test]
fn stage1_identity() {
    check_stage1("idt", stage1_config((0.0, 0.0, 1.0), GanMode::LeastSquares));
}

#[test]
fn stage1_full_objective_multi_scale() {
    let cfg = Stage1Config {
        multi_scale_degraded: true,
        ..stage1_config((5.0, 10.0, 5.0), GanMode::LeastSquares)
    };
    check_stage1("total", cfg);
}

fn stage2_config(lambdas: (f64, f64, f64)) -> Stage2Config {
    Stage2Config {
        lambda_corr: lambdas.0,
        lambda_adv: lambdas.1,
        lambda_content: lambdas.2,
        generator: small_generator(),
        discriminator: small_discriminator(),
        ..Default::default()
    }
}

fn check_stage2(name: &str, cfg: Stage2Config) {
    let backbone = bundled::<f64>(3);
    let tap = backbone.tap("block1").unwrap().clone();
    let g_d2c = Generator::<f64>::new(&GeneratorSpec {
        in_channels: 16,
        feature_hw: (16, 16),
        ..small_generator()
    })
    .unwrap();
    let mut trainer = Stage2Trainer::new(&cfg, &backbone, &tap, &g_d2c).unwrap();
    let ef = positive_features::<f64>(&[2, 16, 16, 16], 5);
    let clear = positive_features::<f64>(&[2, 16, 16, 16], 6);
    let (_, grads) = trainer.generator_gradients(&ef, &clear).unwrap();
    let mut p = trainer.g_e2c.params().clone();
    let r = check_gradients(&mut p, &grads, PROBES, 12, |p| {
        trainer.g_e2c.params_mut().load_from(p).unwrap();
        trainer.generator_losses(&ef, &clear).unwrap().total
    });
    assert!(r.probed >= 20, "{name}: only {} informative parameters", r.probed);
    assert!(r.worst_relative <= TOL, "{name}: worst relative error {:e}", r.worst_relative);
}

#[test]
fn stage2_correlation_raw_gram_batch_mean() {
    check_stage2("corr raw", stage2_config((1.0, 0.0, 0.0)));
}

#[test]
fn stage2_correlation_per_element_mean_to_mean() {
    let cfg = Stage2Config {
        gram_normalization: GramNormalization::PerElement,
        gram_target: GramTarget::MeanToMean,
        ..stage2_config((1.0, 0.0, 0.0))
    };
    check_stage2("corr per-element mean-to-mean", cfg);
}

#[test]
fn stage2_correlation_per_sample_kl() {
    let cfg = Stage2Config {
        gram_normalization: GramNormalization::PerPixel,
        gram_target: GramTarget::PerSample,
        correlation_mode: CorrelationMode::Kl,
        ..stage2_config((1.0, 0.0, 0.0))
    };
    check_stage2("corr kl", cfg);
}

#[test]
fn stage2_correlation_cosine() {
    let cfg = Stage2Config {
        correlation_mode: CorrelationMode::Cosine,
        ..stage2_config((1.0, 0.0, 0.0))
    };
    check_stage2("corr cosine", cfg);
}

#[test]
fn stage2_adversarial() {
    check_stage2("adv", stage2_config((0.0, 1.0, 0.0)));
}

#[test]
fn stage2_content() {
    check_stage2("content", stage2_config((0.0, 0.0, 1.0)));
}

#[test]
fn stage2_full_objective() {
    let cfg = Stage2Config {
        gram_normalization: GramNormalization::PerElement,
        ..stage2_config((1000.0, 5.0, 10.0))
    };
    check_stage2("total", cfg);
}
