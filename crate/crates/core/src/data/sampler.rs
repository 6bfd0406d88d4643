//! Unpaired batch sampling.
//!
//! The clear and degraded sides draw from two independent ChaCha streams
//! derived from one seed, so clear-side indices depend only on the seed and
//! the clear set size.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{to_batch, RgbImage};
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const CLEAR_STREAM: u64 = 1;
const DEGRADED_STREAM: u64 = 2;

/// Draws indices from `0..len`, uniformly, from its own stream.
#[derive(Clone, Debug)]
pub struct IndexStream {
    rng: ChaCha8Rng,
    len: usize,
    replacement: bool,
}

impl IndexStream {
    pub fn new(seed: u64, stream: u64, len: usize, replacement: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::InsufficientData("cannot sample from an empty set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(Self { rng, len, replacement })
    }

    /// `batch` indices; distinct within the batch when sampling without
    /// replacement.
    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<usize>> {
        if self.replacement {
            Ok((0..batch).map(|_| self.rng.random_range(0..self.len)).collect())
        } else {
            if batch > self.len {
                return Err(Error::InsufficientData(format!(
                    "batch {batch} exceeds {} entries without replacement",
                    self.len
                )));
            }
            Ok(index::sample(&mut self.rng, self.len, batch).into_vec())
        }
    }
}

/// Paired index streams for the two unpaired sides.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    clear: IndexStream,
    degraded: IndexStream,
}

impl UnpairedSampler {
    pub fn new(clear_len: usize, degraded_len: usize, seed: u64, replacement: bool) -> Result<Self> {
        Ok(Self {
            clear: IndexStream::new(seed, CLEAR_STREAM, clear_len, replacement)?,
            degraded: IndexStream::new(seed, DEGRADED_STREAM, degraded_len, replacement)?,
        })
    }

    /// (clear indices, degraded indices), equal lengths.
    pub fn next_indices(&mut self, batch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((self.clear.next_batch(batch)?, self.degraded.next_batch(batch)?))
    }
}

/// A clear batch and a degraded batch with no correspondence between rows.
#[derive(Clone, Debug)]
pub struct UnpairedBatch<T = f32> {
    pub clear_images: Tensor<T>,
    pub degraded_images: Tensor<T>,
    pub clear_indices: Vec<usize>,
    pub degraded_indices: Vec<usize>,
}

/// One unpaired batch drawn from two manifests.
pub fn sample_unpaired_batch<T: Real>(
    clear: &DatasetManifest,
    degraded: &DatasetManifest,
    batch: usize,
    seed: u64,
    replacement: bool,
) -> Result<UnpairedBatch<T>> {
    let mut sampler = UnpairedSampler::new(clear.len(), degraded.len(), seed, replacement)?;
    let (ci, di) = sampler.next_indices(batch)?;
    let load = |m: &DatasetManifest, idx: &[usize]| -> Result<Tensor<T>> {
        let imgs: Vec<RgbImage> = idx.iter().map(|&i| m.load_image(i)).collect::<Result<_>>()?;
        to_batch(&imgs.iter().collect::<Vec<_>>())
    };
    Ok(UnpairedBatch {
        clear_images: load(clear, &ci)?,
        degraded_images: load(degraded, &di)?,
        clear_indices: ci,
        degraded_indices: di,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_indices() {
        let mut a = UnpairedSampler::new(100, 100, 7, true).unwrap();
        let mut b = UnpairedSampler::new(100, 100, 7, true).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_indices(5).unwrap(), b.next_indices(5).unwrap());
        }
    }

    #[test]
    fn oversized_batch_without_replacement_fails() {
        let mut s = UnpairedSampler::new(4, 10, 1, false).unwrap();
        assert!(matches!(s.next_indices(5), Err(Error::InsufficientData(_))));
        let mut ok = UnpairedSampler::new(4, 10, 1, false).unwrap();
        let (c, _) = ok.next_indices(4).unwrap();
        let mut sorted = c.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn clear_side_ignores_degraded_set() {
        let mut a = UnpairedSampler::new(50, 10, 3, true).unwrap();
        let mut b = UnpairedSampler::new(50, 977, 3, true).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_indices(5).unwrap().0, b.next_indices(5).unwrap().0);
        }
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(UnpairedSampler::new(0, 3, 1, true).is_err());
    }
}
