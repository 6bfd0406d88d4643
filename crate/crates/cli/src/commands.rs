use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, ValueEnum};
use ufem_core::backbone::{load_backbone, BackboneHandle, BackboneSpec, TapPoint, WeightsSource};
use ufem_core::data::manifest::LABEL_FILE;
use ufem_core::data::{build_manifest, degrade, synth, DatasetManifest, Domain};
use ufem_core::dcp::{dcp_report, LabeledSet};
use ufem_core::runtime::eval::{evaluate_classification, EvalReport};
use ufem_core::runtime::{ablation_report_manifest, compose_ufem, train_backbone, UfemCheckpoint};
use ufem_core::train::stage1::train_stage1_images;
use ufem_core::train::stage2::train_stage2_images;
use ufem_core::train::{RunOutputs, Stage1Checkpoint, Stage2Checkpoint};

use crate::config::{NamedRoot, RunConfig};
use crate::{plot, CliError, Command, DegradationArgs, Run};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Destination root; class subdirectories are created under it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DomainArg {
    Clear,
    Degraded,
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    /// Dataset root [config: data.clear].
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "clear")]
    pub domain: DomainArg,
    /// Corruption to record per entry [config: data.degradation].
    #[command(flatten)]
    pub degradation: DegradationArgs,
    /// Manifest path; defaults to `manifest.jsonl` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// Clean dataset root [config: data.clear].
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Destination root for the degraded tree.
    #[arg(long)]
    pub out: PathBuf,
    /// [config: data.degradation]
    #[command(flatten)]
    pub degradation: DegradationArgs,
}

#[derive(Args, Debug, Default)]
pub struct WeightsArgs {
    /// Trained backbone container [config: backbone.weights].
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Always starts from the bundled initialization; `backbone.weights` is
/// ignored so one config can name the weights this command produces.
#[derive(Args, Debug)]
pub struct TrainBackboneArgs {
    /// Labelled clean training set [config: data.clear].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out set scored after training [config: data.eval].
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// [config: backbone.recipe.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [config: backbone.recipe.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialization seed [config: backbone.bundled_seed].
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DcpArgs {
    /// `label=DIR`, repeatable; replaces eval.dcp_sets.
    #[arg(long = "set", value_parser = parse_named_root)]
    pub sets: Vec<NamedRoot>,
    /// [config: eval.dcp_tap]
    #[arg(long)]
    pub tap: Option<String>,
    /// Skip t-SNE [config: eval.dcp.embed = false].
    #[arg(long)]
    pub no_embed: bool,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

#[derive(Args, Debug)]
pub struct Stage1Args {
    /// [config: data.clear]
    #[arg(long)]
    pub clear: Option<PathBuf>,
    /// [config: data.degraded]
    #[arg(long)]
    pub degraded: Option<PathBuf>,
    /// Enhancement tap [config: backbone.insertion_tap].
    #[arg(long)]
    pub tap: Option<String>,
    /// [config: stage1.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [config: stage1.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

#[derive(Args, Debug)]
pub struct Stage2Args {
    /// [config: data.clear]
    #[arg(long)]
    pub clear: Option<PathBuf>,
    /// [config: data.degraded]
    #[arg(long)]
    pub degraded: Option<PathBuf>,
    /// Stage-1 checkpoint [config: data.stage1_checkpoint].
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// [config: stage2.epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [config: stage2.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    /// [config: data.stage1_checkpoint]
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// [config: data.stage2_checkpoint]
    #[arg(long)]
    pub stage2: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Labelled evaluation set [config: data.eval].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Module to insert [config: data.ufem_checkpoint].
    #[arg(long, conflicts_with = "baseline")]
    pub ufem: Option<PathBuf>,
    /// Ignore any configured module.
    #[arg(long)]
    pub baseline: bool,
    /// Ignore any configured corruption.
    #[arg(long, conflicts_with = "kind")]
    pub clean: bool,
    /// On-the-fly corruption [config: eval.degradation].
    #[command(flatten)]
    pub degradation: DegradationArgs,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// [config: data.eval]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [config: data.stage1_checkpoint]
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// [config: data.stage2_checkpoint]
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    /// [config: eval.degradation]
    #[command(flatten)]
    pub degradation: DegradationArgs,
    #[command(flatten)]
    pub weights: WeightsArgs,
}

fn parse_named_root(s: &str) -> Result<NamedRoot, String> {
    let (label, root) = s.split_once('=').ok_or_else(|| format!("expected LABEL=DIR, got `{s}`"))?;
    if label.is_empty() {
        return Err("empty set label".into());
    }
    Ok(NamedRoot {
        label: label.into(),
        root: root.into(),
    })
}

fn set<T>(slot: &mut Option<T>, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = Some(v.clone());
    }
}

fn set_weights(c: &mut RunConfig, w: &WeightsArgs) {
    set(&mut c.backbone.weights, &w.weights);
}

/// Folds command-line flags into `c`, so the echoed config is the one the
/// run actually used.
pub fn apply_overrides(cmd: &Command, c: &mut RunConfig) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(_) => {}
        Command::Manifest(a) => {
            set(&mut c.data.clear, &a.root);
            c.data.degradation = a.degradation.resolve(c.data.degradation)?;
        }
        Command::Degrade(a) => {
            set(&mut c.data.clear, &a.input);
            c.data.degradation = a.degradation.resolve(c.data.degradation)?;
        }
        Command::TrainBackbone(a) => {
            set(&mut c.data.clear, &a.data);
            set(&mut c.data.eval, &a.eval);
            if let Some(e) = a.epochs {
                c.backbone.recipe.epochs = e;
            }
            if let Some(s) = a.seed {
                c.backbone.recipe.seed = s;
            }
            if let Some(s) = a.init_seed {
                c.backbone.bundled_seed = s;
            }
        }
        Command::DcpReport(a) => {
            if !a.sets.is_empty() {
                c.eval.dcp_sets = a.sets.clone();
            }
            set_opt(&mut c.eval.dcp_tap, &a.tap);
            if a.no_embed {
                c.eval.dcp.embed = false;
            }
            set_weights(c, &a.weights);
        }
        Command::TrainStage1(a) => {
            set(&mut c.data.clear, &a.clear);
            set(&mut c.data.degraded, &a.degraded);
            set(&mut c.backbone.insertion_tap, &a.tap);
            set_opt(&mut c.stage1.epochs, &a.epochs);
            set_opt(&mut c.stage1.seed, &a.seed);
            set_weights(c, &a.weights);
        }
        Command::TrainStage2(a) => {
            set(&mut c.data.clear, &a.clear);
            set(&mut c.data.degraded, &a.degraded);
            set(&mut c.data.stage1_checkpoint, &a.stage1);
            set_opt(&mut c.stage2.epochs, &a.epochs);
            set_opt(&mut c.stage2.seed, &a.seed);
            set_weights(c, &a.weights);
        }
        Command::Compose(a) => {
            set(&mut c.data.stage1_checkpoint, &a.stage1);
            set(&mut c.data.stage2_checkpoint, &a.stage2);
        }
        Command::Eval(a) => {
            set(&mut c.data.eval, &a.data);
            set(&mut c.data.ufem_checkpoint, &a.ufem);
            if a.baseline {
                c.data.ufem_checkpoint = None;
            }
            c.eval.degradation = a.degradation.resolve(c.eval.degradation)?;
            if a.clean {
                c.eval.degradation = None;
            }
            set_weights(c, &a.weights);
        }
        Command::Ablate(a) => {
            set(&mut c.data.eval, &a.data);
            set(&mut c.data.stage1_checkpoint, &a.stage1);
            set(&mut c.data.stage2_checkpoint, &a.stage2);
            c.eval.degradation = a.degradation.resolve(c.eval.degradation)?;
            set_weights(c, &a.weights);
        }
    }
    Ok(())
}

fn set_opt<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

pub fn execute(cmd: &Command, c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth_cmd(a),
        Command::Manifest(a) => manifest_cmd(a, c, run),
        Command::Degrade(a) => degrade_cmd(a, c),
        Command::TrainBackbone(_) => train_backbone_cmd(c, run),
        Command::DcpReport(_) => dcp_cmd(c, run),
        Command::TrainStage1(_) => stage1_cmd(c, run),
        Command::TrainStage2(_) => stage2_cmd(c, run),
        Command::Compose(_) => compose_cmd(c, run),
        Command::Eval(_) => eval_cmd(c, run),
        Command::Ablate(_) => ablate_cmd(c, run),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, what: &str, key: &str) -> anyhow::Result<&'a PathBuf> {
    let p = value
        .as_ref()
        .ok_or_else(|| CliError::Dependency(format!("no {what}: pass it as a flag or set `{key}`")))?;
    if !p.exists() {
        return Err(CliError::Dependency(format!("{what} {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn dataset(root: &Option<PathBuf>, manifest: &Option<PathBuf>, what: &str, domain: Domain) -> anyhow::Result<DatasetManifest> {
    let root = require(root, &format!("{what} dataset"), &format!("data.{what}"))?;
    Ok(match manifest {
        Some(m) => DatasetManifest::load(m, root)?,
        None => build_manifest(root, domain, None)?.manifest,
    })
}

fn backbone(c: &RunConfig) -> anyhow::Result<BackboneHandle<f32>> {
    if let Some(w) = &c.backbone.weights {
        require(&Some(w.clone()), "backbone weights", "backbone.weights")?;
    }
    Ok(load_backbone(&c.backbone.spec())?)
}

fn insertion_tap(b: &BackboneHandle<f32>, c: &RunConfig) -> anyhow::Result<TapPoint> {
    Ok(match &c.backbone.insertion_tap {
        Some(name) => b.tap(name)?.clone(),
        None => b.default_insertion_tap().clone(),
    })
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_cmd(a: &SynthArgs) -> anyhow::Result<()> {
    let n = synth::write_dataset(&a.out, a.per_class, a.seed)?;
    println!("images={n} out={}", a.out.display());
    Ok(())
}

fn manifest_cmd(a: &ManifestArgs, c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let root = require(&c.data.clear, "dataset root", "data.clear")?;
    let domain = match a.domain {
        DomainArg::Clear => Domain::Clear,
        DomainArg::Degraded => Domain::Degraded,
    };
    let out = build_manifest(root, domain, c.data.degradation)?;
    let path = a.out.clone().unwrap_or_else(|| run.path("manifest.jsonl"));
    out.manifest.save(&path)?;
    println!("entries={} skipped={} manifest={}", out.manifest.len(), out.skipped.len(), path.display());
    Ok(())
}

/// Absolute form of `p`, resolving symlinks through its deepest existing
/// ancestor so paths that do not exist yet still compare correctly.
fn resolved(p: &Path) -> PathBuf {
    if let Ok(c) = p.canonicalize() {
        return c;
    }
    match (p.parent(), p.file_name()) {
        (Some(parent), Some(name)) => {
            let parent = if parent.as_os_str().is_empty() { Path::new(".") } else { parent };
            resolved(parent).join(name)
        }
        _ => p.to_path_buf(),
    }
}

/// True when `out` is `input` or lies inside it.
fn inside(input: &Path, out: &Path) -> bool {
    resolved(out).starts_with(resolved(input))
}

/// Writes every image of the input tree, degraded with its per-entry spec,
/// to the same relative path under `out`, plus `manifest.jsonl`.
fn degrade_cmd(a: &DegradeArgs, c: &RunConfig) -> anyhow::Result<()> {
    let input = require(&c.data.clear, "input dataset", "data.clear")?;
    let spec = c
        .data
        .degradation
        .ok_or_else(|| CliError::Config("no degradation: pass --kind/--severity or set `data.degradation`".into()))?;
    if inside(input, &a.out) {
        return Err(CliError::Config("--out must not be the input tree or inside it".into()).into());
    }
    let built = build_manifest(input, Domain::Degraded, Some(spec))?;
    for e in &built.manifest.entries {
        let img = ufem_core::data::RgbImage::load(&built.manifest.resolve(e))?;
        let d = e.degradation.expect("degraded manifest entries carry a spec");
        let dst = a.out.join(&e.path);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        degrade::apply(&img, &d)?.save(&dst)?;
    }
    let labels = input.join(LABEL_FILE);
    if labels.is_file() {
        std::fs::copy(&labels, a.out.join(LABEL_FILE)).with_context(|| format!("copying {}", labels.display()))?;
    }
    let out_manifest = DatasetManifest {
        root: a.out.clone(),
        entries: built.manifest.entries,
    };
    out_manifest.save(&a.out.join("manifest.jsonl"))?;
    println!(
        "images={} kind={} severity={} seed={} out={}",
        out_manifest.len(),
        spec.kind.as_str(),
        spec.severity,
        spec.seed,
        a.out.display()
    );
    Ok(())
}

fn eval_on(model: &dyn ufem_core::runtime::Classifier<f32>, m: &DatasetManifest, c: &RunConfig, label: &str) -> anyhow::Result<EvalReport> {
    Ok(evaluate_classification(model, m, c.eval.degradation, label)?)
}

fn train_backbone_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let train = dataset(&c.data.clear, &c.data.clear_manifest, "clear", Domain::Clear)?;
    let init = load_backbone::<f32>(&BackboneSpec::tinyvgg(WeightsSource::Bundled {
        seed: c.backbone.bundled_seed,
    }))?;
    let (net, stats) = train_backbone(&init, &train.load_all()?, &train.labels(), &c.backbone.recipe)?;
    let path = run.path("backbone.bin");
    net.save(&path)?;
    write(&run.path("stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
    for s in &stats {
        println!("epoch={} loss={:.5} train_top1={:.4}", s.epoch, s.mean_loss, s.train_accuracy);
    }
    if c.data.eval.is_some() {
        let m = dataset(&c.data.eval, &c.data.eval_manifest, "eval", Domain::Clear)?;
        let r = evaluate_classification(&net, &m, None, "none")?;
        write(&run.path("eval.json"), &(r.to_json()? + "\n"))?;
        println!("clean_eval_top1={:.4}", r.top1);
    }
    println!("weights={} checksum={}", path.display(), net.checksum());
    Ok(())
}

fn dcp_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    if c.eval.dcp_sets.len() < 2 {
        return Err(CliError::Config("need at least two --set LABEL=DIR (or eval.dcp_sets)".into()).into());
    }
    let net = backbone(c)?;
    let tap = net.tap(&c.eval.dcp_tap)?.clone();
    let mut sets = Vec::new();
    for s in &c.eval.dcp_sets {
        let m = dataset(&Some(s.root.clone()), &None, &s.label, Domain::Clear)?;
        sets.push(LabeledSet {
            label: s.label.clone(),
            images: m.load_all()?,
        });
    }
    let r = dcp_report(&net, &tap, &sets, &c.eval.dcp)?;
    write(&run.path("dcp_report.json"), &(r.to_json()? + "\n"))?;
    let bars: Vec<Vec<f64>> = r.sets.iter().map(|s| s.per_channel_sparsity.clone()).collect();
    plot::sparsity_bars(&bars, &run.path("sparsity.png"))?;
    for (name, rep) in [("raw", &r.raw_features), ("correlation", &r.correlation_vectors)] {
        if let Some(e) = &rep.embedding {
            plot::scatter(e, &r.point_labels, &run.path(&format!("scatter_{name}.png")))?;
        }
    }
    for s in &r.sets {
        println!("set={} images={} mean_sparsity={:.5}", s.label, s.n_images, s.mean_sparsity);
    }
    let fmt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.4}"));
    println!(
        "tap={} raw_separability={:.4} correlation_separability={:.4} raw_embedding={} correlation_embedding={}",
        tap.name,
        r.raw_features.separability,
        r.correlation_vectors.separability,
        fmt(r.raw_features.embedding_separability),
        fmt(r.correlation_vectors.embedding_separability)
    );
    Ok(())
}

fn training_sets(c: &RunConfig) -> anyhow::Result<(Vec<ufem_core::data::RgbImage>, Vec<ufem_core::data::RgbImage>)> {
    let clear = dataset(&c.data.clear, &c.data.clear_manifest, "clear", Domain::Clear)?;
    let degraded = dataset(&c.data.degraded, &c.data.degraded_manifest, "degraded", Domain::Degraded)?;
    Ok((clear.load_all()?, degraded.load_all()?))
}

fn outputs(run: &Run, stage: &str) -> RunOutputs {
    RunOutputs {
        loss_log: Some(run.path(&format!("loss_{stage}.jsonl"))),
        checkpoint_dir: Some(run.dir.clone()),
    }
}

fn stage1_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let net = backbone(c)?;
    let tap = insertion_tap(&net, c)?;
    let (clear, degraded) = training_sets(c)?;
    let out = train_stage1_images(&c.stage1, &clear, &degraded, &net, &tap, &outputs(run, "stage1"))?;
    let path = run.path("stage1.ufem");
    out.checkpoint.save(&path)?;
    if let Some(last) = out.log.last() {
        println!("steps={} final_loss_g={:.5} final_loss_d={:.5}", out.log.len(), last.total_g, last.total_d);
    }
    println!("checkpoint={}", path.display());
    Ok(())
}

fn load_stage1(c: &RunConfig) -> anyhow::Result<Stage1Checkpoint<f32>> {
    let p = require(&c.data.stage1_checkpoint, "stage-1 checkpoint", "data.stage1_checkpoint")?;
    Ok(Stage1Checkpoint::load(p)?)
}

fn load_stage2(c: &RunConfig) -> anyhow::Result<Stage2Checkpoint<f32>> {
    let p = require(&c.data.stage2_checkpoint, "stage-2 checkpoint", "data.stage2_checkpoint")?;
    Ok(Stage2Checkpoint::load(p)?)
}

fn stage2_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let s1 = load_stage1(c)?;
    let net = backbone(c)?;
    let (clear, degraded) = training_sets(c)?;
    let out = train_stage2_images(&c.stage2, &clear, &degraded, &net, &s1, &outputs(run, "stage2"))?;
    let path = run.path("stage2.ufem");
    out.checkpoint.save(&path)?;
    if let Some(last) = out.log.last() {
        println!("steps={} final_loss_g={:.5} final_loss_d={:.5}", out.log.len(), last.total_g, last.total_d);
    }
    println!("checkpoint={}", path.display());
    Ok(())
}

fn compose_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let s1 = load_stage1(c)?;
    let s2 = load_stage2(c)?;
    let m = compose_ufem(&s1, &s2)?;
    let path = run.path("ufem.ufem");
    m.save(&path)?;
    println!("tap={} backbone_checksum={} module={}", m.tap.name, m.backbone_checksum, path.display());
    Ok(())
}

fn eval_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let m = dataset(&c.data.eval, &c.data.eval_manifest, "eval", Domain::Clear)?;
    let net = Arc::new(backbone(c)?);
    let report = match &c.data.ufem_checkpoint {
        Some(_) => {
            let p = require(&c.data.ufem_checkpoint, "module checkpoint", "data.ufem_checkpoint")?;
            let module = Arc::new(UfemCheckpoint::<f32>::load(p)?);
            eval_on(&module.insert(&net)?, &m, c, "ufem")?
        }
        None => eval_on(&*net, &m, c, "none")?,
    };
    write(&run.path("eval.json"), &(report.to_json()? + "\n"))?;
    let condition = c
        .eval
        .degradation
        .map_or("clean".to_string(), |d| format!("{}{}", d.kind.as_str(), d.severity));
    println!(
        "top1={:.4} images={} condition={condition} enhancer={}",
        report.top1, report.n_images, report.condition.enhancer
    );
    Ok(())
}

fn ablate_cmd(c: &RunConfig, run: &Run) -> anyhow::Result<()> {
    let s1 = load_stage1(c)?;
    let s2 = load_stage2(c)?;
    let m = dataset(&c.data.eval, &c.data.eval_manifest, "eval", Domain::Clear)?;
    let net = backbone(c)?;
    let r = ablation_report_manifest(&net, &m, c.eval.degradation.as_ref(), &s1, &s2)?;
    write(&run.path("ablation.json"), &(r.to_json()? + "\n"))?;
    let table = r.to_table();
    write(&run.path("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
