//! Channel statistics of backbone features: zero-response sparsity, channel
//! correlation (Gram) matrices, their flattened upper triangles, a 2-D
//! t-SNE embedding and silhouette separability.
//!
//! All statistics are accumulated in `f64` regardless of the feature type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, DomainTag, TapPoint};
use crate::data::image::{to_batch, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const EXTRACT_BATCH: usize = 50;

fn feature_dims<T: Real>(f: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *f.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("expected (C,H,W) or (N,C,H,W), got {:?}", f.shape()))),
    }
}

/// Fraction of exactly-zero entries per channel, one vector per sample.
/// A (C, H, W) input is treated as a batch of one.
pub fn channel_sparsity<T: Real>(feature: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = feature_dims(feature)?;
    let hw = h * w;
    let d = feature.data();
    Ok((0..n)
        .map(|s| {
            (0..c)
                .map(|ch| {
                    let plane = &d[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    plane.iter().filter(|v| **v == T::zero()).count() as f64 / hw as f64
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramNormalization {
    Raw,
    /// Divided by the number of spatial positions.
    #[default]
    PerPixel,
    /// Divided by channels × spatial positions.
    PerElement,
}

impl GramNormalization {
    /// Divisor applied to a raw Gram of `c` channels over `hw` positions.
    pub fn divisor(self, c: usize, hw: usize) -> f64 {
        match self {
            GramNormalization::Raw => 1.0,
            GramNormalization::PerPixel => hw as f64,
            GramNormalization::PerElement => (c * hw) as f64,
        }
    }
}

/// Symmetric C×C channel correlation matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub channels: usize,
    pub data: Vec<f64>,
    pub tap: Option<TapPoint>,
    pub normalization: GramNormalization,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.channels + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.channels).map(|i| self.get(i, i)).sum()
    }

    /// Smallest eigenvalue via cyclic Jacobi rotations.
    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(&self.data, self.channels)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Eigenvalues of a symmetric n×n matrix (cyclic Jacobi).
pub fn symmetric_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// G = F·Fᵀ for one (C, H, W) feature, F being channels × positions.
/// Only the upper triangle is accumulated; the lower one is mirrored so
/// symmetry is exact.
pub fn gram_matrix<T: Real>(feature: &Tensor<T>, normalization: GramNormalization) -> Result<GramMatrix> {
    let (n, c, h, w) = feature_dims(feature)?;
    if n != 1 {
        return Err(Error::Shape(format!("gram_matrix takes a single feature, got batch {n}")));
    }
    Ok(gram_of_plane_block(feature.data(), c, h * w, normalization))
}

fn gram_of_plane_block<T: Real>(d: &[T], c: usize, hw: usize, normalization: GramNormalization) -> GramMatrix {
    let rows: Vec<Vec<f64>> = (0..c).map(|i| d[i * hw..(i + 1) * hw].iter().map(|v| v.as_f64()).collect()).collect();
    let div = normalization.divisor(c, hw);
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>() / div;
            data[i * c + j] = s;
            data[j * c + i] = s;
        }
    }
    GramMatrix {
        channels: c,
        data,
        tap: None,
        normalization,
    }
}

/// One Gram matrix per sample of an (N, C, H, W) batch.
pub fn gram_matrices<T: Real>(batch: &Tensor<T>, tap: Option<&TapPoint>, normalization: GramNormalization) -> Result<Vec<GramMatrix>> {
    let (n, c, h, w) = feature_dims(batch)?;
    let per = c * h * w;
    Ok((0..n)
        .map(|s| {
            let mut g = gram_of_plane_block(&batch.data()[s * per..(s + 1) * per], c, h * w, normalization);
            g.tap = tap.cloned();
            g
        })
        .collect())
}

/// Flattened upper triangle of a Gram matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationVector {
    pub data: Vec<f64>,
    pub source_tap: Option<TapPoint>,
    pub includes_diagonal: bool,
}

/// Row-major upper triangle: entries (i, j) with i < j, or i ≤ j when
/// `include_diagonal` is set.
pub fn upper_triangle(g: &GramMatrix, include_diagonal: bool) -> CorrelationVector {
    let c = g.channels;
    let off = usize::from(!include_diagonal);
    let data = (0..c).flat_map(|i| (i + off..c).map(move |j| (i, j))).map(|(i, j)| g.get(i, j)).collect();
    CorrelationVector {
        data,
        source_tap: g.tap.clone(),
        includes_diagonal: include_diagonal,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

pub const MIN_EMBED_POINTS: usize = 10;

fn sq_distances(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors differ in dimensionality".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite vector entry".into()));
    }
    Ok(dim)
}

/// Conditional affinities for one row, binary-searching the Gaussian
/// precision until the entropy matches log(perplexity).
fn row_affinities(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = dist.len();
    let target = perplexity.ln();
    let min_d = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
    let mut p = vec![0.0; n];
    // Scale to the data so the search starts near the answer.
    let spread = (0..n).filter(|&j| j != i).map(|j| dist[j] - min_d).sum::<f64>() / (n - 1) as f64;
    if spread > 0.0 {
        beta = 1.0 / spread;
    }
    for _ in 0..200 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(dist[j] - min_d) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            p[j] /= sum;
            if p[j] > 1e-300 {
                h -= p[j] * p[j].ln();
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-7 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions. The perplexity is capped at (n − 1)/3.
pub fn embed_2d(vectors: &[Vec<f64>], seed: u64, config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < MIN_EMBED_POINTS {
        return Err(Error::InsufficientData(format!("embedding needs at least {MIN_EMBED_POINTS} vectors, got {n}")));
    }
    check_vectors(vectors)?;
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let dist = sq_distances(vectors);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = row_affinities(&dist[i * n..(i + 1) * n], i, perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            p[i * n + j] = s;
            p[j * n + i] = s;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations { config.early_exaggeration } else { 1.0 };
        let momentum = if it < config.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                zsum += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let mult = (exaggeration * p[i * n + j] - q / zsum) * q;
                grad[0] += 4.0 * mult * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * mult * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (grad[k] > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                update[i][k] = momentum * update[i][k] - config.learning_rate * gains[i][k] * grad[k];
            }
        }
        let mut mean = [0.0; 2];
        for i in 0..n {
            for k in 0..2 {
                y[i][k] += update[i][k];
                mean[k] += y[i][k] / n as f64;
            }
        }
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "t-SNE embedding".into(),
            step: config.iterations,
            batch_seed: seed,
        });
    }
    Ok(y)
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their cluster contribute 0.
pub fn separability_score(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::Invalid("vector/label count mismatch".into()));
    }
    check_vectors(vectors)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    if present.len() < 2 || present.iter().any(|&c| sizes[c] < 2) {
        return Err(Error::InsufficientData("silhouette needs at least 2 labels with at least 2 points each".into()));
    }
    let n = vectors.len();
    let dist: Vec<f64> = sq_distances(vectors).into_iter().map(f64::sqrt).collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j];
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = present
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcpOptions {
    pub normalization: GramNormalization,
    pub include_diagonal: bool,
    /// Skip the t-SNE embedding and report original-space scores only.
    pub embed: bool,
    pub seed: u64,
    pub tsne: TsneConfig,
}

impl Default for DcpOptions {
    fn default() -> Self {
        Self {
            normalization: GramNormalization::PerPixel,
            include_diagonal: false,
            embed: true,
            seed: 0,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub label: String,
    pub n_images: usize,
    pub mean_sparsity: f64,
    pub per_channel_sparsity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSummary {
    pub dimension: usize,
    /// Silhouette in the representation's own space.
    pub separability: f64,
    /// Silhouette of the 2-D embedding, when computed.
    pub embedding_separability: Option<f64>,
    pub embedding: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcpReport {
    pub tap: TapPoint,
    pub options: DcpOptions,
    pub sets: Vec<SetSummary>,
    /// Set index of every point, in extraction order.
    pub point_labels: Vec<usize>,
    pub raw_features: RepresentationSummary,
    pub correlation_vectors: RepresentationSummary,
}

impl DcpReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A named image set for [`dcp_report`].
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub label: String,
    pub images: Vec<RgbImage>,
}

fn summarize(vectors: &[Vec<f64>], labels: &[usize], options: &DcpOptions) -> Result<RepresentationSummary> {
    let separability = separability_score(vectors, labels)?;
    let (embedding_separability, embedding) = if options.embed {
        let e = embed_2d(vectors, options.seed, &options.tsne)?;
        let pts: Vec<Vec<f64>> = e.iter().map(|p| p.to_vec()).collect();
        (Some(separability_score(&pts, labels)?), Some(e))
    } else {
        (None, None)
    };
    Ok(RepresentationSummary {
        dimension: vectors.first().map_or(0, Vec::len),
        separability,
        embedding_separability,
        embedding,
    })
}

/// Sparsity per set plus separability of flattened features against
/// correlation vectors across sets.
pub fn dcp_report<T: Real>(backbone: &BackboneHandle<T>, tap: &TapPoint, sets: &[LabeledSet], options: &DcpOptions) -> Result<DcpReport> {
    if sets.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 image sets, got {}", sets.len())));
    }
    let mut raw = Vec::new();
    let mut corr = Vec::new();
    let mut labels = Vec::new();
    let mut summaries = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        if set.images.is_empty() {
            return Err(Error::InsufficientData(format!("image set '{}' is empty", set.label)));
        }
        let mut channel_sum: Vec<f64> = vec![0.0; tap.channels()];
        for chunk in set.images.chunks(EXTRACT_BATCH) {
            let x = to_batch::<T>(&chunk.iter().collect::<Vec<_>>())?;
            let f = backbone.extract_features(&x, tap, DomainTag::Clear)?.data;
            for s in channel_sparsity(&f)? {
                channel_sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
            for g in gram_matrices(&f, Some(tap), options.normalization)? {
                corr.push(upper_triangle(&g, options.include_diagonal).data);
            }
            let per = f.len() / chunk.len();
            raw.extend(f.data().chunks(per).map(|c| c.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
            labels.extend(std::iter::repeat_n(si, chunk.len()));
        }
        let per_channel: Vec<f64> = channel_sum.iter().map(|s| s / set.images.len() as f64).collect();
        summaries.push(SetSummary {
            label: set.label.clone(),
            n_images: set.images.len(),
            mean_sparsity: per_channel.iter().sum::<f64>() / per_channel.len() as f64,
            per_channel_sparsity: per_channel,
        });
    }
    Ok(DcpReport {
        tap: tap.clone(),
        options: options.clone(),
        sets: summaries,
        raw_features: summarize(&raw, &labels, options)?,
        correlation_vectors: summarize(&corr, &labels, options)?,
        point_labels: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn sparsity_counts_exact_zeros() {
        let f = t3(3, 2, 4, [vec![0.0; 8], vec![0.5; 8], vec![0.0, 1.0, 0.0, 2.0, 3.0, 0.0, 4.0, 5.0]].concat());
        assert_eq!(channel_sparsity(&f).unwrap(), vec![vec![1.0, 0.0, 0.375]]);
    }

    #[test]
    fn gram_small_cases() {
        let g = gram_matrix(&t3(1, 2, 2, vec![1.0; 4]), GramNormalization::Raw).unwrap();
        assert_eq!(g.data, vec![4.0]);
        let g = gram_matrix(&t3(2, 2, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]), GramNormalization::Raw).unwrap();
        assert_eq!(g.data, vec![1.0, 0.0, 0.0, 1.0]);
        let pp = gram_matrix(&t3(1, 2, 2, vec![1.0; 4]), GramNormalization::PerPixel).unwrap();
        assert_eq!(pp.data, vec![1.0]);
    }

    #[test]
    fn upper_triangle_layout() {
        let g = GramMatrix {
            channels: 2,
            data: vec![1.0, 2.0, 2.0, 3.0],
            tap: None,
            normalization: GramNormalization::Raw,
        };
        assert_eq!(upper_triangle(&g, false).data, vec![2.0]);
        assert_eq!(upper_triangle(&g, true).data, vec![1.0, 2.0, 3.0]);
        let g4 = GramMatrix {
            channels: 4,
            data: vec![0.0; 16],
            tap: None,
            normalization: GramNormalization::Raw,
        };
        assert_eq!(upper_triangle(&g4, false).data.len(), 6);
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        let mut e = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_limits() {
        let mut v = Vec::new();
        let mut l = Vec::new();
        for i in 0..5 {
            v.push(vec![i as f64 * 0.01, 0.0]);
            l.push(0);
            v.push(vec![100.0 + i as f64 * 0.01, 0.0]);
            l.push(1);
        }
        assert!(separability_score(&v, &l).unwrap() > 0.95);
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let same: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let labels: Vec<usize> = (0..12).map(|i| i / 6).collect();
        assert!(separability_score(&same, &labels).unwrap() <= 0.0);
    }

    #[test]
    fn silhouette_rejects_degenerate_labels() {
        let v: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        assert!(separability_score(&v, &[0, 0, 0, 0]).is_err());
        assert!(separability_score(&v, &[0, 0, 0, 1]).is_err());
    }

    #[test]
    fn embedding_needs_ten_points() {
        let v: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        assert!(matches!(embed_2d(&v, 0, &TsneConfig::default()), Err(Error::InsufficientData(_))));
    }
}
