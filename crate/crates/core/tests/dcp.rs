mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use ufem_core::dcp::*;
use ufem_core::Tensor;

fn gram_oracle(f: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..hw {
                s += f[i * hw + k] * f[j * hw + k];
            }
            g[i * c + j] = s;
        }
    }
    g
}

#[test]
fn gram_matches_double_loop_oracle() {
    let mut r = rng(1);
    for _ in 0..200 {
        let c = r.random_range(1..=8);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=(64 / h).min(8));
        let f = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut r);
        let g = gram_matrix(&f, GramNormalization::Raw).unwrap();
        let o = gram_oracle(f.data(), c, h * w);
        let err = g.data.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "max abs error {err}");
    }
}

#[test]
fn normalizations_divide_the_raw_gram() {
    let f = positive_features::<f64>(&[3, 4, 5], 2);
    let raw = gram_matrix(&f, GramNormalization::Raw).unwrap();
    let pp = gram_matrix(&f, GramNormalization::PerPixel).unwrap();
    let pe = gram_matrix(&f, GramNormalization::PerElement).unwrap();
    for k in 0..9 {
        assert!((pp.data[k] * 20.0 - raw.data[k]).abs() < 1e-12);
        assert!((pe.data[k] * 60.0 - raw.data[k]).abs() < 1e-12);
    }
}

#[test]
fn batch_grams_equal_per_sample_grams() {
    let b = positive_features::<f32>(&[4, 5, 3, 3], 3);
    let gs = gram_matrices(&b, None, GramNormalization::Raw).unwrap();
    for (s, g) in gs.iter().enumerate() {
        assert_eq!(g, &gram_matrix(&b.sample(s).reshape(&[5, 3, 3]).unwrap(), GramNormalization::Raw).unwrap());
    }
}

#[test]
fn upper_triangle_follows_index_oracle() {
    let mut r = rng(4);
    let mut m = vec![0.0; 25];
    for i in 0..5 {
        for j in i..5 {
            let v: f64 = r.random();
            m[i * 5 + j] = v;
            m[j * 5 + i] = v;
        }
    }
    let g = GramMatrix {
        channels: 5,
        data: m.clone(),
        tap: None,
        normalization: GramNormalization::Raw,
    };
    let mut expect = Vec::new();
    for i in 0..5 {
        for j in (i + 1)..5 {
            expect.push(m[i * 5 + j]);
        }
    }
    assert_eq!(upper_triangle(&g, false).data, expect);
    assert_eq!(upper_triangle(&g, true).data.len(), 15);
}

fn feature_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=6, 1usize..=12).prop_flat_map(|(c, hw)| (Just(c), Just(hw), prop::collection::vec(-2.0f64..2.0, c * hw)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gram_is_symmetric_and_psd((c, hw, data) in feature_strategy()) {
        let f = Tensor::from_vec(&[c, hw, 1], data).unwrap();
        let g = gram_matrix(&f, GramNormalization::Raw).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        prop_assert!(g.min_eigenvalue() >= -1e-9 * g.trace().max(1.0));
    }

    #[test]
    fn gram_scales_quadratically((c, hw, data) in feature_strategy(), k in -3.0f64..3.0) {
        let f = Tensor::from_vec(&[c, hw, 1], data).unwrap();
        let g = gram_matrix(&f, GramNormalization::Raw).unwrap();
        let gk = gram_matrix(&f.map(|x| x * k), GramNormalization::Raw).unwrap();
        for (a, b) in g.data.iter().zip(&gk.data) {
            prop_assert!((a * k * k - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn spatial_permutation_leaves_gram_unchanged((c, hw, data) in feature_strategy(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..hw).collect();
        perm.shuffle(&mut rng(seed));
        let permuted: Vec<f64> = (0..c).flat_map(|ch| perm.iter().map(|&p| data[ch * hw + p]).collect::<Vec<_>>()).collect();
        let g = gram_matrix(&Tensor::from_vec(&[c, hw, 1], data.clone()).unwrap(), GramNormalization::Raw).unwrap();
        let gp = gram_matrix(&Tensor::from_vec(&[c, hw, 1], permuted).unwrap(), GramNormalization::Raw).unwrap();
        for (a, b) in g.data.iter().zip(&gp.data) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn channel_permutation_permutes_gram((c, hw, data) in feature_strategy(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng(seed));
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| data[p * hw..(p + 1) * hw].to_vec()).collect();
        let g = gram_matrix(&Tensor::from_vec(&[c, hw, 1], data.clone()).unwrap(), GramNormalization::Raw).unwrap();
        let gp = gram_matrix(&Tensor::from_vec(&[c, hw, 1], permuted).unwrap(), GramNormalization::Raw).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(gp.get(i, j), g.get(perm[i], perm[j]));
            }
        }
    }

    /// Mean sparsity over channels equals the zero fraction of the map.
    #[test]
    fn sparsity_sum_rule(c in 1usize..6, hw in 1usize..20, seed in 0u64..1000) {
        let mut r = rng(seed);
        let data: Vec<f32> = (0..c * hw).map(|_| if r.random_bool(0.4) { 0.0 } else { r.random_range(0.1..1.0) }).collect();
        let zeros = data.iter().filter(|v| **v == 0.0).count();
        let s = channel_sparsity(&Tensor::from_vec(&[c, hw, 1], data).unwrap()).unwrap();
        let total: f64 = s[0].iter().sum::<f64>() * hw as f64;
        prop_assert!((total - zeros as f64).abs() < 1e-9);
        prop_assert!(s[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sparsity_examples() {
    let z = Tensor::<f32>::zeros(&[1, 4, 4]);
    assert_eq!(channel_sparsity(&z).unwrap(), vec![vec![1.0]]);
    let p = Tensor::<f32>::full(&[1, 4, 4], 0.3);
    assert_eq!(channel_sparsity(&p).unwrap(), vec![vec![0.0]]);
    let t = Tensor::<f32>::from_vec(&[1, 2, 4], vec![0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!(channel_sparsity(&t).unwrap(), vec![vec![0.375]]);
}

fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let n = Normal::new(0.0, spread).unwrap();
    let mut v = Vec::new();
    let mut l = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per {
            v.push(c.iter().map(|x| x + n.sample(&mut r)).collect());
            l.push(k);
        }
    }
    (v, l)
}

fn silhouette_oracle(v: &[Vec<f64>], l: &[usize]) -> f64 {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let k = l.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..v.len() {
        let mean_to = |c: usize| {
            let idx: Vec<usize> = (0..v.len()).filter(|&j| j != i && l[j] == c).collect();
            idx.iter().map(|&j| d(&v[i], &v[j])).sum::<f64>() / idx.len() as f64
        };
        let a = mean_to(l[i]);
        let b = (0..k).filter(|&c| c != l[i]).map(mean_to).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / v.len() as f64
}

#[test]
fn silhouette_matches_formula_oracle() {
    let centers = vec![vec![0.0, 0.0, 0.0], vec![3.0, 0.0, 1.0], vec![0.0, 4.0, -1.0]];
    let (v, l) = blobs(&centers, 15, 1.0, 5);
    let s = separability_score(&v, &l).unwrap();
    assert!((s - silhouette_oracle(&v, &l)).abs() < 1e-9);
}

#[test]
fn embedding_of_separated_blobs_stays_separated() {
    let dim = 20;
    let centers = vec![vec![0.0; dim], vec![8.0; dim]];
    let (v, l) = blobs(&centers, 25, 1.0, 6);
    let e = embed_2d(&v, 3, &TsneConfig::default()).unwrap();
    assert_eq!(e.len(), 50);
    assert!(e.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    let pts: Vec<Vec<f64>> = e.iter().map(|p| p.to_vec()).collect();
    assert!(separability_score(&pts, &l).unwrap() > 0.5);
    assert_eq!(e, embed_2d(&v, 3, &TsneConfig::default()).unwrap());
}

#[test]
fn identical_sets_are_not_separable() {
    let (v, _) = blobs(&[vec![0.0, 0.0]], 10, 1.0, 7);
    let mut both = v.clone();
    both.extend(v);
    let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
    assert!(separability_score(&both, &labels).unwrap() <= 0.0);
}
