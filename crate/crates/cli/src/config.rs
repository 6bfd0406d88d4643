//! Run configuration files.
//!
//! Precedence, highest first: command-line flags, the `--config` file,
//! built-in defaults. Unknown keys anywhere in the file are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ufem_core::backbone::{BackboneSpec, WeightsSource};
use ufem_core::data::DegradationSpec;
use ufem_core::dcp::DcpOptions;
use ufem_core::runtime::BackboneRecipe;
use ufem_core::train::{Stage1Config, Stage2Config};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub data: DataSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    /// Trained weights container. Absent means the seeded bundled
    /// initialization.
    pub weights: Option<PathBuf>,
    pub bundled_seed: u64,
    /// Enhancement tap; absent means the backbone's default.
    pub insertion_tap: Option<String>,
    pub recipe: BackboneRecipe,
}

impl BackboneSection {
    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec::tinyvgg(match &self.weights {
            Some(path) => WeightsSource::File { path: path.clone() },
            None => WeightsSource::Bundled { seed: self.bundled_seed },
        })
    }
}

/// Dataset roots and upstream artifacts. A dataset root is scanned unless a
/// manifest for it is given, in which case manifest paths resolve against it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub clear: Option<PathBuf>,
    pub clear_manifest: Option<PathBuf>,
    pub degraded: Option<PathBuf>,
    pub degraded_manifest: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Corruption applied by `degrade` and recorded by `manifest`.
    pub degradation: Option<DegradationSpec>,
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    pub ufem_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// On-the-fly corruption of the evaluation images.
    pub degradation: Option<DegradationSpec>,
    pub dcp_tap: String,
    pub dcp_sets: Vec<NamedRoot>,
    pub dcp: DcpOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            degradation: None,
            dcp_tap: "block2".into(),
            dcp_sets: Vec::new(),
            dcp: DcpOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRoot {
    pub label: String,
    pub root: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
