//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use ufem_core::backbone::{BackboneHandle, Enhancer, Identity};
use ufem_core::container::Endianness;
use ufem_core::data::{synth, DegradationKind, DegradationSpec, RgbImage};
use ufem_core::dcp::*;
use ufem_core::nets::{DiscriminatorSpec, Generator, GeneratorSpec};
use ufem_core::runtime::eval::{degrade_all, evaluate_images, predict_logits, Condition};
use ufem_core::runtime::*;
use ufem_core::train::losses::*;
use ufem_core::train::stage1::{discriminator_taps, train_stage1_images};
use ufem_core::train::stage2::{train_stage2_images, GramTarget};
use ufem_core::train::*;
use ufem_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: &str, title: &str, budget: Duration, results: &mut Vec<bool>, f: impl FnOnce() -> Outcome) {
    let t0 = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let dt = t0.elapsed();
    let in_time = dt <= budget;
    let pass = r.pass && in_time;
    let timing = if in_time {
        format!("{:.1}s", dt.as_secs_f64())
    } else {
        format!("{:.1}s over budget {:.0}s", dt.as_secs_f64(), budget.as_secs_f64())
    };
    println!("{} [{id}] {title}: {} ({timing})", if pass { "PASS" } else { "FAIL" }, r.detail);
    results.push(pass);
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// Criterion 1

fn gram_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut worst_err: f64 = 0.0;
    let mut worst_eig: f64 = f64::INFINITY;
    let mut symmetric = true;
    let mut psd = true;
    for _ in 0..1000 {
        let c = r.random_range(1..=8);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=(64 / h).min(8));
        let f = Tensor::<f32>::randn(&[c, h, w], 1.0, &mut r);
        let g = gram_matrix(&f, GramNormalization::Raw).unwrap();
        let hw = h * w;
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0f64;
                for k in 0..hw {
                    s += f.data()[i * hw + k] as f64 * f.data()[j * hw + k] as f64;
                }
                worst_err = worst_err.max((g.get(i, j) - s).abs());
                symmetric &= g.get(i, j) == g.get(j, i);
            }
        }
        let e = g.min_eigenvalue();
        worst_eig = worst_eig.min(e / g.trace().max(f64::MIN_POSITIVE));
        psd &= e >= -1e-6 * g.trace();
    }
    outcome(
        worst_err <= 1e-6 && symmetric && psd,
        format!("1000 features, max abs err {worst_err:.2e} (<= 1e-6), symmetric {symmetric}, min eig/trace {worst_eig:.2e} (>= -1e-6)"),
    )
}

// Criterion 2

fn loss_formulas() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let t = |shape: &[usize], v: f64| Tensor::<f64>::full(shape, v);
    let (d, _) = adversarial_loss(&t(&[2, 1, 2, 2], 1.0), &t(&[2, 1, 2, 2], 0.0), GanMode::LeastSquares).unwrap();
    checks.push(("least squares optimum = 0", d == 0.0));
    let (d, _) = adversarial_loss(&t(&[8], 0.0), &t(&[8], 0.0), GanMode::VanillaLog).unwrap();
    checks.push(("balanced vanilla = 2 ln 2", (d - 2.0 * 2f64.ln()).abs() < 1e-15));
    let x = positive_features::<f64>(&[2, 3, 4, 4], 1);
    let z = t(&[2, 3, 4, 4], 0.0);
    let o = t(&[2, 3, 4, 4], 1.0);
    checks.push(("cycle x_rec = x -> 0", cycle_loss(&x, &x).unwrap() == 0.0));
    checks.push(("cycle zeros vs ones -> 1", cycle_loss(&z, &o).unwrap() == 1.0));
    checks.push(("identity G = id -> 0", identity_loss(&x, &x).unwrap() == 0.0));
    checks.push(("identity zeros vs ones -> 1", identity_loss(&z, &o).unwrap() == 1.0));
    checks.push(("equal layers L -> L", (multi_adversarial_loss(&[0.8; 3], &[0.5, 0.3, 0.2]).unwrap() - 0.8).abs() < 1e-15));
    checks.push(("(1,2,3) x (0.5,0.3,0.2) = 1.7", (multi_adversarial_loss(&[1.0, 2.0, 3.0], &[0.5, 0.3, 0.2]).unwrap() - 1.7).abs() < 1e-15));
    checks.push(("multi-adversarial zeros -> 0", multi_adversarial_loss(&[0.0; 3], &[0.5, 0.3, 0.2]).unwrap() == 0.0));
    let zero1 = Stage1Components { mul_adv: 0.0, cyc: 0.0, idt: 0.0 };
    checks.push(("stage-1 objective zeros -> 0", stage1_objective(zero1, Stage1Lambdas::default()) == 0.0));
    let unit = Stage1Components { mul_adv: 1.0, cyc: 1.0, idt: 1.0 };
    checks.push(("stage-1 objective units -> 20", stage1_objective(unit, Stage1Lambdas::default()) == 20.0));
    let gram = positive_features::<f64>(&[4, 4], 2);
    checks.push((
        "identical Gram lists -> 0",
        correlation_loss(&[gram.clone(), gram.clone()], &[gram.clone(), gram], &[1.0, 2.0], CorrelationMode::L1).unwrap() == 0.0,
    ));
    checks.push((
        "uniform Gram difference 2 -> 2",
        correlation_loss(&[t(&[3, 3], 5.0)], &[t(&[3, 3], 3.0)], &[1.0], CorrelationMode::L1).unwrap() == 2.0,
    ));
    checks.push(("content EF~ = EF -> 0", content_loss(&x, &x).unwrap() == 0.0));
    checks.push(("content zeros vs ones -> 1", content_loss(&z, &o).unwrap() == 1.0));
    let zero2 = Stage2Components { correlation: 0.0, adv: 0.0, content: 0.0 };
    checks.push(("stage-2 objective zeros -> 0", stage2_objective(zero2, Stage2Lambdas::default()) == 0.0));
    let c2 = Stage2Components { correlation: 0.001, adv: 1.0, content: 1.0 };
    checks.push(("stage-2 objective (0.001,1,1) -> 16", stage2_objective(c2, Stage2Lambdas::default()) == 16.0));

    let b = bundled::<f32>(0);
    let names = |ts: &[_]| ts.iter().map(|t: &ufem_core::backbone::TapPoint| t.name.clone()).collect::<Vec<_>>();
    let taps = discriminator_taps(&b, b.tap("block1").unwrap()).unwrap();
    checks.push(("block1 -> (block1, block2, block3)", names(&taps) == ["block1", "block2", "block3"]));
    checks.push(("last tap -> error", discriminator_taps(&b, b.tap("block4").unwrap()).is_err()));

    let tap = b.tap("block1").unwrap().clone();
    let s1cfg = Stage1Config {
        epochs: 0,
        generator: small_generator(),
        discriminator: small_discriminator(),
        ..Default::default()
    };
    let feats = positive_features::<f32>(&[4, 16, 16, 16], 3);
    let mut t1 = Stage1Trainer::new(&s1cfg, &b, &tap).unwrap();
    let fresh1 = t1.checkpoint();
    t1.fit(&feats, &feats, &RunOutputs::default()).unwrap();
    checks.push(("stage-1 zero steps = init", t1.checkpoint().g_d2c.params() == fresh1.g_d2c.params() && t1.checkpoint().g_c2d.params() == fresh1.g_c2d.params()));
    let s2cfg = Stage2Config {
        epochs: 0,
        generator: small_generator(),
        discriminator: small_discriminator(),
        ..Default::default()
    };
    let mut t2 = Stage2Trainer::new(&s2cfg, &b, &tap, &fresh1.g_d2c).unwrap();
    let fresh2 = t2.checkpoint();
    t2.fit(&feats, &feats, &RunOutputs::default()).unwrap();
    checks.push(("stage-2 zero steps = init", t2.checkpoint().g_e2c.params() == fresh2.g_e2c.params()));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} examples exact", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

// Criterion 3

fn gradient_checks() -> Outcome {
    let b = bundled::<f64>(3);
    let tap = b.tap("block1").unwrap().clone();
    let xc = positive_features::<f64>(&[2, 16, 16, 16], 1);
    let xd = positive_features::<f64>(&[2, 16, 16, 16], 2);
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, l) in [("mul_adv", (1.0, 0.0, 0.0)), ("cyc", (0.0, 1.0, 0.0)), ("idt", (0.0, 0.0, 1.0))] {
        let cfg = Stage1Config {
            lambda_mul_adv: l.0,
            lambda_cyc: l.1,
            lambda_idt: l.2,
            generator: small_generator(),
            discriminator: small_discriminator(),
            ..Default::default()
        };
        let mut t = Stage1Trainer::new(&cfg, &b, &tap).unwrap();
        let (_, ga, gb) = t.generator_gradients(&xc, &xd).unwrap();
        let mut pa = t.g_d2c.params().clone();
        let ra = check_gradients(&mut pa, &ga, 12, 10, |p| {
            t.g_d2c.params_mut().load_from(p).unwrap();
            t.generator_losses(&xc, &xd).unwrap().total
        });
        t.g_d2c.params_mut().load_from(&pa).unwrap();
        let mut pb = t.g_c2d.params().clone();
        let rb = check_gradients(&mut pb, &gb, 12, 11, |p| {
            t.g_c2d.params_mut().load_from(p).unwrap();
            t.generator_losses(&xc, &xd).unwrap().total
        });
        let n = ra.probed + rb.probed;
        let worst = ra.worst_relative.max(rb.worst_relative);
        ok &= n >= 20 && worst <= 1e-4;
        lines.push(format!("{name} {n}p {worst:.1e}"));
    }
    let g_d2c = Generator::<f64>::new(&GeneratorSpec {
        in_channels: 16,
        feature_hw: (16, 16),
        ..small_generator()
    })
    .unwrap();
    let stage2_cases = [
        ("corr-gram", (1.0, 0.0, 0.0), GramNormalization::Raw, GramTarget::BatchMean),
        ("corr-gram-mean", (1.0, 0.0, 0.0), GramNormalization::PerElement, GramTarget::MeanToMean),
        ("adv2", (0.0, 1.0, 0.0), GramNormalization::Raw, GramTarget::BatchMean),
        ("content", (0.0, 0.0, 1.0), GramNormalization::Raw, GramTarget::BatchMean),
    ];
    for (name, l, norm, target) in stage2_cases {
        let cfg = Stage2Config {
            lambda_corr: l.0,
            lambda_adv: l.1,
            lambda_content: l.2,
            gram_normalization: norm,
            gram_target: target,
            generator: small_generator(),
            discriminator: small_discriminator(),
            ..Default::default()
        };
        let mut t = Stage2Trainer::new(&cfg, &b, &tap, &g_d2c).unwrap();
        let (_, grads) = t.generator_gradients(&xd, &xc).unwrap();
        let mut p = t.g_e2c.params().clone();
        let r = check_gradients(&mut p, &grads, 24, 12, |p| {
            t.g_e2c.params_mut().load_from(p).unwrap();
            t.generator_losses(&xd, &xc).unwrap().total
        });
        ok &= r.probed >= 20 && r.worst_relative <= 1e-4;
        lines.push(format!("{name} {}p {:.1e}", r.probed, r.worst_relative));
    }
    outcome(ok, format!("worst relative error per term (<= 1e-4): {}", lines.join(", ")))
}

// Shared fixtures for 4-9

const FOG3_TRAIN_SEED: u64 = 7;
const FOG3_EVAL_SEED: u64 = 5;

fn fog3(seed: u64) -> DegradationSpec {
    DegradationSpec::new(DegradationKind::Fog, 3, seed).unwrap()
}

fn unzip(per_class: usize, seed: u64) -> (Vec<RgbImage>, Vec<usize>) {
    synth::generate(per_class, seed).into_iter().unzip()
}

fn train_reference_backbone() -> BackboneHandle<f32> {
    let (ti, tl) = unzip(400, 1);
    let init = bundled::<f32>(0);
    let recipe = BackboneRecipe {
        epochs: 6,
        ..Default::default()
    };
    train_backbone(&init, &ti, &tl, &recipe).unwrap().0
}

fn degrade_set(images: &[RgbImage], kind: DegradationKind) -> Vec<RgbImage> {
    degrade_all(images, Some(&DegradationSpec::new(kind, 3, 11).unwrap())).unwrap()
}

// Criterion 4

fn dcp_sets() -> Vec<LabeledSet> {
    let set = |s: u64| -> Vec<RgbImage> { unzip(10, 1000 + s).0 };
    vec![
        LabeledSet {
            label: "clear".into(),
            images: set(0),
        },
        LabeledSet {
            label: "fog3".into(),
            images: degrade_set(&set(1), DegradationKind::Fog),
        },
        LabeledSet {
            label: "blur3".into(),
            images: degrade_set(&set(2), DegradationKind::MotionBlur),
        },
    ]
}

fn dcp_separability(net: &BackboneHandle<f32>) -> Outcome {
    let sets = dcp_sets();
    let tap = net.tap("block2").unwrap();
    let r = dcp_report(net, tap, &sets, &DcpOptions::default()).unwrap();
    let corr = r.correlation_vectors.separability;
    let raw = r.raw_features.separability;
    outcome(
        corr >= raw + 0.10 && corr > 0.0,
        format!(
            "block2, 3x100 images: correlation {corr:.3} vs raw {raw:.3} (margin {:+.3}, need >= +0.10); t-SNE {:.3} vs {:.3}",
            corr - raw,
            r.correlation_vectors.embedding_separability.unwrap_or(f64::NAN),
            r.raw_features.embedding_separability.unwrap_or(f64::NAN)
        ),
    )
}

// Criterion 5

fn sparsity_ordering(net: &BackboneHandle<f32>) -> Outcome {
    let sets = dcp_sets();
    let tap = net.tap("block1").unwrap();
    let mean_sparsity = |imgs: &[RgbImage]| -> f64 {
        let f = extract_tap_features(net, imgs, tap).unwrap();
        let s = channel_sparsity(&f).unwrap();
        s.iter().flatten().sum::<f64>() / (s.len() * s[0].len()) as f64
    };
    let clear = mean_sparsity(&sets[0].images);
    let fog = mean_sparsity(&sets[1].images);
    outcome(fog > clear, format!("block1, 100 images: fog-3 {fog:.4} vs clear {clear:.4}"))
}

// Criteria 6, 7, 9b

fn desk_generator() -> GeneratorSpec {
    GeneratorSpec {
        base_width: 32,
        residual_blocks: 2,
        ..Default::default()
    }
}

fn desk_discriminator() -> DiscriminatorSpec {
    DiscriminatorSpec {
        base_width: 32,
        ..Default::default()
    }
}

fn desk_stage1() -> Stage1Config {
    Stage1Config {
        epochs: 30,
        generator: desk_generator(),
        discriminator: desk_discriminator(),
        ..Default::default()
    }
}

fn desk_stage2() -> Stage2Config {
    Stage2Config {
        epochs: 30,
        gram_normalization: GramNormalization::PerElement,
        gram_target: GramTarget::MeanToMean,
        generator: desk_generator(),
        discriminator: desk_discriminator(),
        ..Default::default()
    }
}

struct Recovery {
    s1: Stage1Checkpoint<f32>,
    s2: Stage2Checkpoint<f32>,
    checksum_before: String,
    checksum_after: String,
}

fn recovery(net: &Arc<BackboneHandle<f32>>, eval_set: &(Vec<RgbImage>, Vec<usize>), slot: &mut Option<Recovery>) -> Outcome {
    let (vi, vl) = eval_set;
    let clean = evaluate_images(&**net, vi, vl, Condition::baseline(None)).unwrap().top1;
    let base = evaluate_images(&**net, vi, vl, Condition::baseline(Some(fog3(FOG3_EVAL_SEED)))).unwrap().top1;

    let clear = unzip(10, 301).0;
    let degraded = degrade_all(&unzip(10, 302).0, Some(&fog3(FOG3_TRAIN_SEED))).unwrap();
    let checksum_before = net.checksum();
    let tap = net.default_insertion_tap().clone();
    let s1 = train_stage1_images(&desk_stage1(), &clear, &degraded, net, &tap, &RunOutputs::default()).unwrap();
    let s2 = train_stage2_images(&desk_stage2(), &clear, &degraded, net, &s1.checkpoint, &RunOutputs::default()).unwrap();
    let checksum_after = net.checksum();
    let module = Arc::new(compose_ufem(&s1.checkpoint, &s2.checkpoint).unwrap());
    let aug = module.insert(net).unwrap();
    let enhanced = evaluate_images(&aug, vi, vl, Condition::baseline(Some(fog3(FOG3_EVAL_SEED)))).unwrap().top1;
    let clean_bypassed = evaluate_images(&**net, vi, vl, Condition::baseline(None)).unwrap().top1;

    let drop = 100.0 * (clean - base);
    let gain = 100.0 * (enhanced - base);
    let pass = clean >= 0.60 && drop >= 15.0 && gain >= 3.0 && clean_bypassed == clean;
    *slot = Some(Recovery {
        s1: s1.checkpoint,
        s2: s2.checkpoint,
        checksum_before,
        checksum_after,
    });
    outcome(
        pass,
        format!(
            "{} held-out images: clean {:.1}% (>= 60), fog-3 {:.1}% (drop {drop:.1} >= 15), UFEM {:.1}% (gain {gain:+.1} >= 3), clean bypassed {:.1}%",
            vi.len(),
            100.0 * clean,
            100.0 * base,
            100.0 * enhanced,
            100.0 * clean_bypassed
        ),
    )
}

fn ordering(net: &BackboneHandle<f32>, eval_set: &(Vec<RgbImage>, Vec<usize>), rec: Option<&Recovery>) -> Outcome {
    let Some(rec) = rec else {
        return outcome(false, "no checkpoints from the recovery run");
    };
    let r = ablation_report(net, &eval_set.0, &eval_set.1, Some(&fog3(FOG3_EVAL_SEED)), &rec.s1, &rec.s2).unwrap();
    let top = |n| 100.0 * r.top1(n).unwrap();
    let (b, s1, s2, both) = (top("baseline"), top("s1_only"), top("s2_only"), top("s1_s2"));
    let pass = both > b && both >= s1.max(s2) - 1.0;
    outcome(
        pass,
        format!("baseline {b:.1}, S1 {s1:.1}, S2 {s2:.1}, S1+S2 {both:.1} (need S1+S2 > baseline and >= max(S1,S2) - 1)"),
    )
}

fn distance_statistic(net: &BackboneHandle<f32>, rec: Option<&Recovery>) -> Option<(f64, f64)> {
    let rec = rec?;
    let tap = &rec.s1.tap;
    let clear = extract_tap_features(net, &unzip(10, 401).0, tap).ok()?;
    let degraded = extract_tap_features(net, &degrade_all(&unzip(10, 402).0, Some(&fog3(9))).ok()?, tap).ok()?;
    let module = compose_ufem(&rec.s1, &rec.s2).ok()?;
    let enhanced = module.enhance(&degraded).ok()?;
    let norm = GramNormalization::PerElement;
    Some((
        mean_correlation_distance(&degraded, &clear, norm).ok()?,
        mean_correlation_distance(&enhanced, &clear, norm).ok()?,
    ))
}

// Criterion 8

fn small_stage1(seed: u64) -> Stage1Config {
    Stage1Config {
        epochs: 2,
        batch: 4,
        generator: small_generator(),
        discriminator: small_discriminator(),
        seed,
        ..Default::default()
    }
}

fn small_stage2(seed: u64) -> Stage2Config {
    Stage2Config {
        epochs: 2,
        batch: 4,
        gram_normalization: GramNormalization::PerElement,
        gram_target: GramTarget::MeanToMean,
        generator: small_generator(),
        discriminator: small_discriminator(),
        seed,
        ..Default::default()
    }
}

fn determinism(net: &Arc<BackboneHandle<f32>>) -> Outcome {
    let clear = unzip(2, 501).0;
    let degraded = degrade_all(&unzip(2, 502).0, Some(&fog3(3))).unwrap();
    let tap = net.default_insertion_tap().clone();
    let pipeline = || {
        let s1 = train_stage1_images(&small_stage1(42), &clear, &degraded, net, &tap, &RunOutputs::default()).unwrap();
        let s2 = train_stage2_images(&small_stage2(42), &clear, &degraded, net, &s1.checkpoint, &RunOutputs::default()).unwrap();
        let m = compose_ufem(&s1.checkpoint, &s2.checkpoint).unwrap();
        let bytes = [
            s1.checkpoint.to_container().unwrap().to_bytes(Endianness::Little).unwrap(),
            s2.checkpoint.to_container().unwrap().to_bytes(Endianness::Little).unwrap(),
            m.to_container().unwrap().to_bytes(Endianness::Little).unwrap(),
        ];
        (s1.log, s2.log, bytes, m)
    };
    let a = pipeline();
    let b = pipeline();
    let same_logs = a.0 == b.0 && a.1 == b.1;
    let same_bytes = a.2 == b.2;

    let dir = tempfile::tempdir().unwrap();
    let fixtures = unzip(1, 503).0[..5].to_vec();
    let module = Arc::new(a.3);
    let before = predict_logits(&module.insert(net).unwrap(), &fixtures).unwrap();
    let mut round_trips = true;
    for (name, e) in [("le.ufem", Endianness::Little), ("be.ufem", Endianness::Big)] {
        let p = dir.path().join(name);
        module.save_with(&p, e).unwrap();
        let back = Arc::new(UfemCheckpoint::<f32>::load(&p).unwrap());
        round_trips &= bits(&predict_logits(&back.insert(net).unwrap(), &fixtures).unwrap()) == bits(&before);
    }
    let bp = dir.path().join("backbone.bin");
    net.save(&bp).unwrap();
    let reloaded = ufem_core::backbone::load_backbone::<f32>(&ufem_core::backbone::BackboneSpec::tinyvgg(
        ufem_core::backbone::WeightsSource::File { path: bp },
    ))
    .unwrap();
    round_trips &= bits(&predict_logits(&reloaded, &fixtures).unwrap()) == bits(&predict_logits(&**net, &fixtures).unwrap());
    outcome(
        same_logs && same_bytes && round_trips,
        format!(
            "two pipeline runs: loss trajectories identical {same_logs} ({}+{} steps), checkpoints bitwise {same_bytes}; save/load forward on 5 fixtures bitwise {round_trips}",
            a.0.len(),
            a.1.len()
        ),
    )
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// Criterion 9

fn no_op(net: &Arc<BackboneHandle<f32>>, rec: Option<&Recovery>) -> Outcome {
    let imgs = unzip(10, 601).0;
    let plain = predict_logits(&**net, &imgs).unwrap();
    let mut all_taps = true;
    for name in ["block1", "block2", "block3", "block4"] {
        let aug = net.insert_module(Arc::new(Identity), net.tap(name).unwrap()).unwrap();
        all_taps &= bits(&predict_logits(&aug, &imgs).unwrap()) == bits(&plain);
    }
    let checksums = rec.is_some_and(|r| r.checksum_before == r.checksum_after && r.checksum_after == net.checksum());
    outcome(
        all_taps && checksums,
        format!("identity insertion at every tap bitwise on 100 images {all_taps}; backbone checksum unchanged by both stages {checksums}"),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results = Vec::new();
    run("1", "Gram oracle", minutes(1), &mut results, gram_oracle);
    run("2", "loss formula suite", Duration::from_secs(10), &mut results, loss_formulas);
    run("3", "gradient verification", minutes(5), &mut results, gradient_checks);

    let tb = Instant::now();
    let net = Arc::new(train_reference_backbone());
    let backbone_time = tb.elapsed();
    println!("# reference backbone trained in {:.1}s", backbone_time.as_secs_f64());

    run("4", "DCP separability", minutes(15), &mut results, || dcp_separability(&net));
    run("5", "sparsity ordering", minutes(5), &mut results, || sparsity_ordering(&net));

    let eval_set = unzip(50, 2);
    let mut rec = None;
    run("6", "end-to-end recovery", minutes(30).saturating_sub(backbone_time), &mut results, || {
        recovery(&net, &eval_set, &mut rec)
    });
    run("7", "two-stage ordering", minutes(10), &mut results, || ordering(&net, &eval_set, rec.as_ref()));
    if let Some((before, after)) = distance_statistic(&net, rec.as_ref()) {
        println!("# correlation distance to clear mean: degraded {before:.5}, enhanced {after:.5}");
    }
    run("8", "determinism and serialization", minutes(10), &mut results, || determinism(&net));
    run("9", "no-op safety", minutes(5), &mut results, || no_op(&net, rec.as_ref()));

    let passed = results.iter().filter(|p| **p).count();
    println!("# {passed}/{} criteria passed in {:.1}s", results.len(), t0.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
