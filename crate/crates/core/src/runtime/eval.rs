//! Top-1 classification evaluation.

use serde::{Deserialize, Serialize};

use crate::backbone::{AugmentedBackbone, BackboneHandle};
use crate::data::degrade::{self, DegradationSpec};
use crate::data::image::{to_batch, RgbImage};
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const EVAL_BATCH: usize = 50;

/// Anything mapping an image batch to logits.
pub trait Classifier<T: Real> {
    fn class_count(&self) -> usize;
    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Classifier<T> for BackboneHandle<T> {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(images)
    }
}

impl<T: Real> Classifier<T> for AugmentedBackbone<T> {
    fn class_count(&self) -> usize {
        self.backbone().class_count
    }

    fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(images)
    }
}

/// Index of the largest entry per row of an (N, K) tensor; ties go to the
/// lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub degradation: Option<DegradationSpec>,
    pub enhancer: String,
}

impl Condition {
    pub fn baseline(degradation: Option<DegradationSpec>) -> Self {
        Self {
            degradation,
            enhancer: "none".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub n_images: usize,
    pub condition: Condition,
    /// Per-image predicted class, in input order.
    pub predictions: Vec<usize>,
}

impl EvalReport {
    /// Builds a report from predictions; per-class accuracy is 0 for
    /// classes with no images.
    pub fn from_predictions(predictions: Vec<usize>, labels: &[usize], class_count: usize, condition: Condition) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InsufficientData("nothing to evaluate".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::Invalid("prediction/label count mismatch".into()));
        }
        let mut count = vec![0usize; class_count];
        let mut hit = vec![0usize; class_count];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= class_count {
                return Err(Error::Invalid(format!("label {l} outside {class_count} classes")));
            }
            count[l] += 1;
            if p == l {
                hit[l] += 1;
            }
        }
        let correct: usize = hit.iter().sum();
        Ok(Self {
            top1: correct as f64 / labels.len() as f64,
            per_class_accuracy: hit
                .iter()
                .zip(&count)
                .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
                .collect(),
            per_class_count: count,
            n_images: labels.len(),
            condition,
            predictions,
        })
    }

    /// Accuracy recomputed from the per-class breakdown.
    pub fn weighted_class_accuracy(&self) -> f64 {
        self.per_class_accuracy
            .iter()
            .zip(&self.per_class_count)
            .map(|(a, &c)| a * c as f64)
            .sum::<f64>()
            / self.n_images as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Report from precomputed logits.
pub fn evaluate_logits<T: Real>(logits: &Tensor<T>, labels: &[usize], condition: Condition) -> Result<EvalReport> {
    let k = logits.shape().get(1).copied().unwrap_or(0);
    EvalReport::from_predictions(argmax_rows(logits), labels, k, condition)
}

/// Applies `degradation` (per-image seeded) to each image when given.
pub fn degrade_all(images: &[RgbImage], degradation: Option<&DegradationSpec>) -> Result<Vec<RgbImage>> {
    match degradation {
        None => Ok(images.to_vec()),
        Some(spec) => images
            .iter()
            .enumerate()
            .map(|(i, img)| degrade::apply(img, &spec.for_item(i as u64)))
            .collect(),
    }
}

/// Logits for every image, in order, computed in fixed-size batches.
pub fn predict_logits<T: Real, C: Classifier<T> + ?Sized>(model: &C, images: &[RgbImage]) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(EVAL_BATCH) {
        let x = to_batch::<T>(&chunk.iter().collect::<Vec<_>>())?;
        parts.push(model.logits(&x)?);
    }
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

pub fn evaluate_images<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    images: &[RgbImage],
    labels: &[usize],
    condition: Condition,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::InsufficientData("nothing to evaluate".into()));
    }
    let degraded = degrade_all(images, condition.degradation.as_ref())?;
    let logits = predict_logits(model, &degraded)?;
    EvalReport::from_predictions(argmax_rows(&logits), labels, model.class_count(), condition)
}

/// Top-1 over a manifest, optionally degrading images on the fly.
pub fn evaluate_classification<T: Real, C: Classifier<T> + ?Sized>(
    model: &C,
    manifest: &DatasetManifest,
    on_the_fly: Option<DegradationSpec>,
    enhancer_label: &str,
) -> Result<EvalReport> {
    manifest.validate(Some(model.class_count()))?;
    let images = manifest.load_all()?;
    evaluate_images(
        model,
        &images,
        &manifest.labels(),
        Condition {
            degradation: on_the_fly,
            enhancer: enhancer_label.into(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_logits(preds: &[usize], k: usize) -> Tensor<f32> {
        let mut data = vec![0.0; preds.len() * k];
        for (i, &p) in preds.iter().enumerate() {
            data[i * k + p] = 1.0;
        }
        Tensor::from_vec(&[preds.len(), k], data).unwrap()
    }

    #[test]
    fn perfect_and_partial_accuracy() {
        let labels: Vec<usize> = (0..10).collect();
        let all = evaluate_logits(&one_hot_logits(&labels, 10), &labels, Condition::baseline(None)).unwrap();
        assert_eq!(all.top1, 1.0);
        let mut preds = labels.clone();
        preds[0] = 1;
        preds[4] = 5;
        preds[9] = 0;
        let r = evaluate_logits(&one_hot_logits(&preds, 10), &labels, Condition::baseline(None)).unwrap();
        assert_eq!(r.top1, 0.7);
        assert_eq!(r.per_class_count.iter().sum::<usize>(), r.n_images);
        assert!((r.weighted_class_accuracy() - r.top1).abs() < 1e-12);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let r = EvalReport::from_predictions(vec![], &[], 10, Condition::baseline(None));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 1.0, 0.0, -1.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
