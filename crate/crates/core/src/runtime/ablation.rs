//! Two-stage ablation: baseline, each stage alone, and both.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::{argmax_rows, degrade_all, Condition, EvalReport};
use super::ufem::compose_ufem;
use crate::backbone::{BackboneHandle, DomainTag, Enhancer, FeatureMap};
use crate::data::degrade::DegradationSpec;
use crate::data::image::RgbImage;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::{extract_tap_features, map_batches, Stage1Checkpoint, Stage2Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub degradation: Option<DegradationSpec>,
    pub tap: String,
    pub n_images: usize,
    pub rows: Vec<AblationRow>,
}

pub const ROWS: [&str; 4] = ["baseline", "s1_only", "s2_only", "s1_s2"];

impl AblationReport {
    pub fn top1(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.top1)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table, top-1 in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let cond = self
            .degradation
            .as_ref()
            .map_or("clean".to_string(), |d| format!("{}-{}", d.kind.as_str(), d.severity));
        let _ = writeln!(s, "# {cond} at {} ({} images)", self.tap, self.n_images);
        let _ = writeln!(s, "{:<10} {:>7}", "row", "top1");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>7.2}", r.name, 100.0 * r.top1);
        }
        s
    }
}

/// Top-1 of each row on `images` degraded by `degradation`. "s2_only"
/// applies `G_E2C` directly to degraded features.
pub fn ablation_report<T: Real>(
    backbone: &BackboneHandle<T>,
    images: &[RgbImage],
    labels: &[usize],
    degradation: Option<&DegradationSpec>,
    s1: &Stage1Checkpoint<T>,
    s2: &Stage2Checkpoint<T>,
) -> Result<AblationReport> {
    if images.is_empty() {
        return Err(Error::InsufficientData("nothing to evaluate".into()));
    }
    s1.check_backbone(backbone)?;
    let ufem = compose_ufem(s1, s2)?;
    let tap = &s1.tap;
    let degraded = degrade_all(images, degradation)?;
    let feats = extract_tap_features(backbone, &degraded, tap)?;
    let enhancers: [Option<&dyn Enhancer<T>>; 4] = [None, Some(&s1.g_d2c), Some(&s2.g_e2c), Some(&ufem)];
    let mut rows = Vec::new();
    for (name, enh) in ROWS.iter().zip(enhancers) {
        let f = match enh {
            None => feats.clone(),
            Some(e) => map_batches(&feats, |b| e.enhance(b))?,
        };
        let logits = backbone.forward_from(&FeatureMap::new(f, tap.clone(), DomainTag::Degraded)?, None)?;
        let report = EvalReport::from_predictions(
            argmax_rows(&logits),
            labels,
            backbone.class_count,
            Condition {
                degradation: degradation.cloned(),
                enhancer: name.to_string(),
            },
        )?;
        rows.push(AblationRow {
            name: name.to_string(),
            top1: report.top1,
        });
    }
    Ok(AblationReport {
        degradation: degradation.cloned(),
        tap: tap.name.clone(),
        n_images: images.len(),
        rows,
    })
}

pub fn ablation_report_manifest<T: Real>(
    backbone: &BackboneHandle<T>,
    manifest: &DatasetManifest,
    degradation: Option<&DegradationSpec>,
    s1: &Stage1Checkpoint<T>,
    s2: &Stage2Checkpoint<T>,
) -> Result<AblationReport> {
    manifest.validate(Some(backbone.class_count))?;
    ablation_report(backbone, &manifest.load_all()?, &manifest.labels(), degradation, s1, s2)
}
