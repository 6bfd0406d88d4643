//! Fixed training recipe for the bundled tinyvgg on clean data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, Position};
use crate::data::image::{to_batch, RgbImage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Adam, AdamConfig};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneRecipe {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for BackboneRecipe {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 32,
            lr: 1e-3,
            lr_decay: 0.75,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Trains a thawed copy of `init` and returns it frozen with per-epoch
/// statistics.
pub fn train_backbone<T: Real>(
    init: &BackboneHandle<T>,
    images: &[RgbImage],
    labels: &[usize],
    recipe: &BackboneRecipe,
) -> Result<(BackboneHandle<T>, Vec<EpochStats>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InsufficientData(format!(
            "{} images, {} labels",
            images.len(),
            labels.len()
        )));
    }
    if recipe.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let mut net = init.thaw();
    let mut opt = Adam::new(net.params(), AdamConfig {
        lr: recipe.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut stats = Vec::new();
    let mut lr = recipe.lr;
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, chunk) in order.chunks(recipe.batch).enumerate() {
            let batch: Vec<&RgbImage> = chunk.iter().map(|&i| &images[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = to_batch::<T>(&batch)?;
            let mut g = Graph::new();
            let p = net.bind(&mut g, true);
            let xv = g.constant(x);
            let (logits, _) = net.forward_graph(&mut g, &p, xv, Position::Input, Position::Logits)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: "backbone loss".into(),
                    step,
                    batch_seed: recipe.seed,
                });
            }
            correct += crate::runtime::eval::argmax_rows(g.value(logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            seen += y.len();
            loss_sum += lv * y.len() as f64;
            let grads = g.backward(loss)?;
            opt.update(net.params_mut()?, &p, &grads, lr);
        }
        let s = EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
        };
        log::info!("backbone epoch {epoch}: loss {:.4} acc {:.3}", s.mean_loss, s.train_accuracy);
        stats.push(s);
        lr *= recipe.lr_decay;
    }
    Ok((net.freeze(), stats))
}
