//! Two-stage unpaired training of the feature enhancer.
//!
//! Both stages work on features read out of a frozen backbone at the
//! enhancement tap. Images are pushed through the shallow prefix once up
//! front; every step then gathers a batch from those cached features.

pub mod losses;
pub mod stage1;
pub mod stage2;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, TapPoint};
use crate::data::image::{to_batch, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use losses::{CorrelationMode, GanMode};
pub use stage1::{train_stage1, Stage1Checkpoint, Stage1Config, Stage1Outcome, Stage1Trainer};
pub use stage2::{train_stage2, Stage2Checkpoint, Stage2Config, Stage2Outcome, Stage2Trainer};

const EXTRACT_BATCH: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Constant for the first half of training, then linear decay towards 0.
    #[default]
    LinearDecay,
    /// ×0.1 every 10 epochs.
    Step,
    Constant,
}

impl Schedule {
    /// Multiplier on the base learning rate during `epoch` (0-based).
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Step => 0.1f64.powi((epoch / 10) as i32),
            Schedule::LinearDecay => {
                let start = epochs / 2;
                let past = epoch.saturating_sub(start) as f64;
                1.0 - past / (epochs - start + 1) as f64
            }
        }
    }
}

/// Pool of previously generated samples fed to the discriminator.
///
/// Until full, every query sample is stored and returned. Afterwards each
/// sample is, with probability 1/2, swapped for a random stored one.
#[derive(Clone, Debug)]
pub struct HistoryBuffer<T> {
    capacity: usize,
    items: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> HistoryBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn query(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = batch.sample(i);
            if self.items.len() < self.capacity {
                self.items.push(s.clone());
                out.push(s);
            } else if self.rng.random_bool(0.5) {
                let j = self.rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.items[j], s));
            } else {
                out.push(s);
            }
        }
        Tensor::concat_batch(&out.iter().collect::<Vec<_>>())
    }
}

/// Rows `idx` of a batch-major tensor, in order.
pub fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.sample(i)).collect();
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Features of every image at `tap`, stacked in input order.
pub fn extract_tap_features<T: Real>(backbone: &BackboneHandle<T>, images: &[RgbImage], tap: &TapPoint) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::InsufficientData("no images to extract features from".into()));
    }
    let mut parts = Vec::new();
    for chunk in images.chunks(EXTRACT_BATCH) {
        let x = to_batch::<T>(&chunk.iter().collect::<Vec<_>>())?;
        parts.push(backbone.extract_features(&x, tap, crate::backbone::DomainTag::Clear)?.data);
    }
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Applies `f` to consecutive chunks of a batch-major tensor and restacks.
pub(crate) fn map_batches<T: Real>(t: &Tensor<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + EXTRACT_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        parts.push(f(&gather(t, &idx)?)?);
        start = end;
    }
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

/// Derives an independent seed for sub-component `k`.
pub(crate) fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// One JSON record per line.
pub struct LossLog {
    out: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl LossLog {
    pub fn disabled() -> Self {
        Self { out: None, path: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        if let (Some(out), Some(path)) = (self.out.as_mut(), self.path.as_ref()) {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let (Some(out), Some(path)) = (self.out.as_mut(), self.path.as_ref()) {
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Where a training run writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// JSONL loss log, one record per step.
    pub loss_log: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

pub(crate) fn require_frozen<T: Real>(backbone: &BackboneHandle<T>) -> Result<()> {
    if backbone.is_frozen() {
        Ok(())
    } else {
        Err(Error::Config("training requires a frozen backbone".into()))
    }
}

pub(crate) fn non_finite(what: &str, step: usize, seed: u64, clear_idx: &[usize], degraded_idx: &[usize]) -> Error {
    Error::NonFinite {
        what: format!("{what} (clear batch {clear_idx:?}, degraded batch {degraded_idx:?})"),
        step,
        batch_seed: seed,
    }
}
