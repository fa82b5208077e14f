//! Invariants of the numeric building blocks, checked on random inputs.

mod common;

use common::{naive_distill, rand_map, rand_tensor, rng};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rego::acs::{compensate, distill_reference, normalize_kernel, DynamicKernel, FeatureMap};
use rego::autograd::Tape;
use rego::checkpoint::{Dtype, ModelCheckpoint, ModelConfig};
use rego::dataprep::{binarize, ReferenceIndex};
use rego::generator::GeneratorConfig;
use rego::imageio::ImageSample;
use rego::metrics::{fid, inception_score, DistributionStats};
use rego::styleloss::{
    gram_matrix, layer_grams, style_rank_layer, style_rank_total, style_similarity, GramStyle, RandomConvPyramid,
    StyleConfig,
};
use rego::tensor::Tensor;
use rego::trainer::discriminator_loss;

fn kernel_from_seed(seed: u64, c: usize, spread: f64) -> DynamicKernel {
    let mut r = rng(seed);
    DynamicKernel::from_fn(c, |_, _, _| r.gen_range(-spread..spread))
}

fn gram_of(seed: u64, h: usize, w: usize, c: usize) -> GramStyle {
    gram_matrix(&rand_map(&mut rng(seed), h, w, c), 0)
}

fn min_eigenvalue(g: &GramStyle) -> f64 {
    let n = g.dim();
    let m = DMatrix::from_row_slice(n, n, g.data());
    SymmetricEigen::new(m).eigenvalues.min()
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn probability_rows(seed: u64, n: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| r.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn stats_from_seed(seed: u64, n: usize, m: usize) -> DistributionStats {
    let mut r = rng(seed);
    let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    DistributionStats::from_features(&feats).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_kernel_sums_to_one_and_is_positive(seed in any::<u64>(), c in prop::sample::select(vec![2usize, 4, 8, 16]), spread in 0.1f64..30.0) {
        let k = normalize_kernel(&kernel_from_seed(seed, c, spread)).unwrap();
        prop_assert!(k.is_normalized());
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..c).map(|ch| k.get(i, j, ch)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6, "sum {s} at ({i},{j})");
                prop_assert!((0..c).all(|ch| k.get(i, j, ch) > 0.0));
            }
        }
    }

    #[test]
    fn kernel_normalization_ignores_channel_shifts(seed in any::<u64>(), c in 2usize..17, shift in -50.0f64..50.0) {
        let raw = kernel_from_seed(seed, c, 5.0);
        let shifted = DynamicKernel::from_fn(c, |i, j, ch| raw.get(i, j, ch) + shift);
        let a = normalize_kernel(&raw).unwrap();
        let b = normalize_kernel(&shifted).unwrap();
        prop_assert!(a.tensor().max_abs_diff(b.tensor()) <= 1e-9);
    }

    #[test]
    fn flip_is_an_involution(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..5) {
        let x = rand_map(&mut rng(seed), h, w, c);
        prop_assert_eq!(x.flip().flip(), x);
    }

    #[test]
    fn distillation_matches_loops_and_is_linear(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..9, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = rand_map(&mut r, h, w, c);
        let y = rand_map(&mut r, h, w, c);
        let k = normalize_kernel(&kernel_from_seed(seed ^ 0x5a5a, c, 3.0)).unwrap();
        let dx = distill_reference(&x, &k).unwrap();
        let oracle = naive_distill(&x, &k);
        for (got, want) in dx.tensor().data().iter().zip(&oracle) {
            prop_assert!((got - want).abs() <= 1e-6);
        }
        let dy = distill_reference(&y, &k).unwrap();
        let mix = FeatureMap::from_fn(h, w, c, |i, j, ch| a * x.get(i, j, ch) + b * y.get(i, j, ch));
        let dmix = distill_reference(&mix, &k).unwrap();
        let combo = dx.tensor().zip_map(dy.tensor(), |p, q| a * p + b * q);
        prop_assert!(dmix.tensor().max_abs_diff(&combo) <= 1e-6);
    }

    #[test]
    fn compensation_matches_scalar_loop(seed in any::<u64>(), h in 1usize..7, w in 1usize..7, c in 1usize..5) {
        let mut r = rng(seed);
        let (pred, dist, left) = (rand_map(&mut r, h, w, c), rand_map(&mut r, h, w, c), rand_map(&mut r, h, w, c));
        let out = compensate(&pred, &dist, &left).unwrap();
        prop_assert!(out.is_finite());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let gate = 1.0 / (1.0 + (-(left.get(y, w - 1 - x, ch) * pred.get(y, x, ch))).exp());
                    let want = pred.get(y, x, ch) + dist.get(y, x, ch) + left.get(y, x, ch) * gate;
                    prop_assert!((out.get(y, x, ch) - want).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd_and_scales_quadratically(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in 1usize..9, s in 0.05f64..20.0) {
        let x = rand_map(&mut rng(seed), h, w, c);
        let g = gram_matrix(&x, 0);
        for i in 0..c {
            for j in 0..c {
                prop_assert!((g.get(i, j) - g.get(j, i)).abs() <= 1e-9);
            }
        }
        prop_assert!(min_eigenvalue(&g) >= -1e-8);
        let scaled = FeatureMap::from_fn(h, w, c, |i, j, ch| s * x.get(i, j, ch));
        let gs = gram_matrix(&scaled, 0);
        for (a, b) in gs.data().iter().zip(g.data()) {
            prop_assert!((a - s * s * b).abs() <= 1e-7 * (1.0 + (s * s * b).abs()));
        }
        prop_assert!((style_similarity(&gs, &g).unwrap() - 1.0).abs() <= 1e-7);
    }

    #[test]
    fn channel_permutation_permutes_gram(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, c in 2usize..7) {
        let mut r = rng(seed);
        let x = rand_map(&mut r, h, w, c);
        let y = rand_map(&mut r, h, w, c);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut r);
        let px = FeatureMap::from_fn(h, w, c, |i, j, ch| x.get(i, j, perm[ch]));
        let py = FeatureMap::from_fn(h, w, c, |i, j, ch| y.get(i, j, perm[ch]));
        let (gx, gpx) = (gram_matrix(&x, 0), gram_matrix(&px, 0));
        for i in 0..c {
            for j in 0..c {
                prop_assert!((gpx.get(i, j) - gx.get(perm[i], perm[j])).abs() <= 1e-12);
            }
        }
        let before = style_similarity(&gx, &gram_matrix(&y, 0)).unwrap();
        let after = style_similarity(&gpx, &gram_matrix(&py, 0)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9);
    }

    #[test]
    fn similarity_matches_brute_force(seed in any::<u64>(), c in 1usize..8) {
        let a = gram_of(seed, 3, 4, c);
        let b = gram_of(seed.wrapping_add(1), 3, 4, c);
        let s = style_similarity(&a, &b).unwrap();
        prop_assert!((s - brute_cosine(a.data(), b.data())).abs() <= 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        let neg = GramStyle::from_matrix(c, a.data().iter().map(|v| -v).collect(), 0).unwrap();
        prop_assert!((style_similarity(&a, &neg).unwrap() + 1.0).abs() <= 1e-9);
    }

    #[test]
    fn rank_layer_is_nonnegative_and_saturates(seed in any::<u64>(), c in 1usize..6, alpha in 0.0f64..1.0) {
        let r = gram_of(seed, 3, 3, c);
        let l = gram_of(seed ^ 1, 3, 3, c);
        let g = gram_of(seed ^ 2, 3, 3, c);
        let v = style_rank_layer(&r, &l, &g, alpha).unwrap();
        prop_assert!(v >= 0.0);
        let margin = style_similarity(&r, &l).unwrap() - style_similarity(&r, &g).unwrap();
        if margin >= alpha {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!((v - (alpha - margin)).abs() <= 1e-12);
        }
    }

    #[test]
    fn binarization_is_idempotent(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut r = rng(seed);
        let mask = Tensor::from_fn([1, 1, h, w], |_, _, _, _| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
        let once = binarize(&mask, 0.5).unwrap();
        prop_assert_eq!(once.mask(), &mask);
        let twice = binarize(once.mask(), 0.5).unwrap();
        prop_assert_eq!(twice.mask(), &mask);
    }

    #[test]
    fn halves_concatenate_to_the_original(seed in any::<u64>(), h in 1usize..10, half in 1usize..10) {
        let pixels = rand_tensor(&mut rng(seed), [1, 3, h, 2 * half], 0.0, 1.0);
        let s = ImageSample::new("x", pixels.clone()).unwrap();
        let joined = Tensor::concat_width(&s.left_half().unwrap(), &s.right_half().unwrap()).unwrap();
        prop_assert_eq!(joined, pixels);
    }

    #[test]
    fn cosine_is_symmetric_and_ranking_is_brute_force(seed in any::<u64>(), n in 3usize..20, dim in 1usize..12) {
        let mut r = rng(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let index = ReferenceIndex::from_embeddings("test".into(), ids.clone(), emb.clone(), n - 1).unwrap();
        for a in &ids {
            for b in &ids {
                prop_assert!((index.similarity(a, b).unwrap() - index.similarity(b, a).unwrap()).abs() <= 1e-9);
            }
        }
        for (qi, q) in ids.iter().enumerate() {
            let got = index.query_neighbors(q, n - 1).unwrap();
            let mut want: Vec<(usize, f64)> =
                (0..n).filter(|&j| j != qi).map(|j| (j, brute_cosine(&emb[qi], &emb[j]))).collect();
            want.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            for ((gid, gs), (wj, ws)) in got.iter().zip(&want) {
                prop_assert!((gs - ws).abs() <= 1e-9);
                // exact ties may come out in either order; similarities must still agree
                if gid != &ids[*wj] {
                    prop_assert!((index.similarity(q, gid).unwrap() - ws).abs() <= 1e-9);
                }
            }
            prop_assert!(got.windows(2).all(|p| p[0].1 >= p[1].1));
            prop_assert!(got.iter().all(|(id, _)| id != q));
        }
    }

    #[test]
    fn inception_score_is_order_free_and_bounded(seed in any::<u64>(), n in 1usize..30, classes in 2usize..12) {
        let mut preds = probability_rows(seed, n, classes);
        let is = inception_score(&preds).unwrap();
        prop_assert!(is >= 1.0 - 1e-12 && is <= classes as f64 + 1e-9);
        preds.shuffle(&mut rng(seed ^ 9));
        prop_assert!((inception_score(&preds).unwrap() - is).abs() <= 1e-9);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in any::<u64>(), m in 1usize..8, n in 3usize..40) {
        let a = stats_from_seed(seed, n, m);
        let b = stats_from_seed(seed ^ 77, n + 3, m);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn hinge_discriminator_loss_matches_scalar_loop(seed in any::<u64>(), len in 1usize..20) {
        let mut r = rng(seed);
        let real: Vec<f64> = (0..len).map(|_| r.gen_range(-3.0..3.0)).collect();
        let fake: Vec<f64> = (0..len).map(|_| r.gen_range(-3.0..3.0)).collect();
        let tape = Tape::new();
        let rv = tape.constant(Tensor::from_vec([1, 1, 1, len], real.clone()).unwrap());
        let fv = tape.constant(Tensor::from_vec([1, 1, 1, len], fake.clone()).unwrap());
        let got = discriminator_loss(&rv, &fv).value().data()[0];
        let want = real.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / len as f64
            + fake.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / len as f64;
        prop_assert!((got - want).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn style_total_is_the_weighted_sum_of_layers(seed in any::<u64>(), alpha in 0.0f64..0.5) {
        let mut r = rng(seed);
        let imgs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, [1, 3, 32, 32], 0.0, 1.0)).collect();
        let extractor = RandomConvPyramid::new(7);
        let cfg = StyleConfig { alpha, layer_weights: vec![0.1, 0.3, 0.2, 0.15, 0.25], ..StyleConfig::default() };
        let total = style_rank_total(&imgs[0], &imgs[1], &imgs[2], &extractor, &cfg).unwrap();
        let grams: Vec<Vec<GramStyle>> = imgs.iter().map(|t| layer_grams(t, &extractor).unwrap()).collect();
        let by_hand: f64 = cfg
            .layers
            .iter()
            .zip(&cfg.layer_weights)
            .map(|(&d, &w)| w * style_rank_layer(&grams[0][d], &grams[1][d], &grams[2][d], alpha).unwrap())
            .sum();
        prop_assert!(total >= 0.0);
        prop_assert!((total - by_hand).abs() <= 1e-7);
    }

    #[test]
    fn full_precision_checkpoints_round_trip(seed in any::<u64>()) {
        let mut generator = GeneratorConfig::new(16, 32, 4, 2);
        generator.seed = seed;
        let ckpt = ModelCheckpoint::initialize(ModelConfig { generator, style: StyleConfig::default() }).unwrap();
        let bytes = ckpt.to_bytes(Dtype::F64).unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(Dtype::F64).unwrap(), bytes);
    }
}
