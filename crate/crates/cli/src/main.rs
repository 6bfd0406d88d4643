//! `ufem`: manifests, degradations, DCP reports, two-stage training,
//! composition, evaluation and ablations.
//!
//! Every subcommand writes into a run directory: `--run-dir`, or
//! `$UFEM_RUN_ROOT/<subcommand>` (default root `runs`). The directory gets
//! the fully resolved `config.toml`, the invocation in `command.json`, and
//! wall-clock timestamps in `run.log`; nothing else in it is time-dependent.
//!
//! Failures print one line to stderr,
//! `error kind=<kind> message=<json string>`, and exit nonzero
//! (2 usage/config, 3 missing upstream artifact, 1 anything else).

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ufem_core::data::{DegradationKind, DegradationSpec};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Dependency(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Dependency(m) => write!(f, "missing upstream artifact: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser, Debug)]
#[command(name = "ufem", version, about = "Channel-prior analysis and unsupervised feature enhancement")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Parent of default run directories.
    #[arg(long, global = true, env = "UFEM_RUN_ROOT", default_value = "runs")]
    pub run_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the procedural 10-class dataset as a PNG tree.
    Synth(commands::SynthArgs),
    /// Scan a dataset tree into a JSONL manifest.
    Manifest(commands::ManifestArgs),
    /// Write a degraded copy of a dataset tree.
    Degrade(commands::DegradeArgs),
    /// Train the bundled classifier on clean data.
    TrainBackbone(commands::TrainBackboneArgs),
    /// Sparsity and correlation-separability report with plots.
    DcpReport(commands::DcpArgs),
    /// Dual-generator adversarial training on unpaired features.
    TrainStage1(commands::Stage1Args),
    /// Correlation-guided refinement on top of a Stage-1 checkpoint.
    TrainStage2(commands::Stage2Args),
    /// Freeze a Stage-1/Stage-2 pair into one insertable module.
    Compose(commands::ComposeArgs),
    /// Top-1 accuracy with or without an inserted module.
    Eval(commands::EvalArgs),
    /// Baseline / S1 / S2 / S1+S2 comparison.
    Ablate(commands::AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Manifest(_) => "manifest",
            Command::Degrade(_) => "degrade",
            Command::TrainBackbone(_) => "train-backbone",
            Command::DcpReport(_) => "dcp-report",
            Command::TrainStage1(_) => "train-stage1",
            Command::TrainStage2(_) => "train-stage2",
            Command::Compose(_) => "compose",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum KindArg {
    Fog,
    MotionBlur,
    LowLight,
}

impl From<KindArg> for DegradationKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Fog => DegradationKind::Fog,
            KindArg::MotionBlur => DegradationKind::MotionBlur,
            KindArg::LowLight => DegradationKind::LowLight,
        }
    }
}

/// Flags that override a configured degradation field by field.
#[derive(Args, Debug, Clone, Default)]
pub struct DegradationArgs {
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// 1 (mild) to 5 (severe).
    #[arg(long)]
    pub severity: Option<u8>,
    /// Degradation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl DegradationArgs {
    pub fn resolve(&self, base: Option<DegradationSpec>) -> anyhow::Result<Option<DegradationSpec>> {
        let any = self.kind.is_some() || self.severity.is_some() || self.seed.is_some();
        let Some(kind) = self.kind.map(Into::into).or(base.map(|b| b.kind)) else {
            if any {
                return Err(CliError::Config("--severity/--seed given without a degradation kind".into()).into());
            }
            return Ok(None);
        };
        let severity = self
            .severity
            .or(base.map(|b| b.severity))
            .ok_or_else(|| CliError::Config("degradation severity is required".into()))?;
        let seed = self.seed.or(base.map(|b| b.seed)).unwrap_or(0);
        let spec = DegradationSpec::new(kind, severity, seed).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Some(spec))
    }
}

/// A prepared run directory.
pub struct Run {
    pub dir: PathBuf,
    started: SystemTime,
}

impl Run {
    fn open(cli: &Cli, config: &RunConfig) -> anyhow::Result<Self> {
        let dir = cli.run_dir.clone().unwrap_or_else(|| cli.run_root.join(cli.command.name()));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.toml"), config.to_toml()?).context("writing config.toml")?;
        let argv: Vec<String> = std::env::args().skip(1).collect();
        let command = serde_json::json!({ "command": cli.command.name(), "args": argv });
        std::fs::write(dir.join("command.json"), serde_json::to_string_pretty(&command)? + "\n")?;
        Ok(Self {
            dir,
            started: SystemTime::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn finish(&self, status: &str) {
        let unix = |t: SystemTime| t.duration_since(SystemTime::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let now = SystemTime::now();
        let line = format!(
            "started={:.3} finished={:.3} elapsed_s={:.3} status={status}\n",
            unix(self.started),
            unix(now),
            now.duration_since(self.started).map_or(0.0, |d| d.as_secs_f64())
        );
        use std::io::Write;
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(self.dir.join("run.log")) {
            let _ = f.write_all(line.as_bytes());
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => "config",
                CliError::Dependency(_) => "dependency",
            };
        }
        if let Some(e) = cause.downcast_ref::<ufem_core::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "usage" | "config" => 2,
        "dependency" => 3,
        _ => 1,
    }
}

fn report(kind: &str, message: &str) -> ExitCode {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} message={}", serde_json::Value::String(one_line));
    ExitCode::from(exit_code(kind))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    commands::apply_overrides(&cli.command, &mut config)?;
    let run = Run::open(&cli, &config)?;
    let result = commands::execute(&cli.command, &config, &run);
    run.finish(if result.is_ok() { "ok" } else { "error" });
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or_default();
            return report("usage", first.strip_prefix("error: ").unwrap_or(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(error_kind(&e), &format!("{e:#}")),
    }
}
