mod common;

use common::random_tensor;
use gaitchd::backbone::{backbone_forward, frame_shape, init_params, set_pool, BackboneConfig, FEATURE_HEIGHT};
use gaitchd::hd::{hd_backward, hd_forward_with_masks, make_chd_mask};
use gaitchd::tensor::{Shape4, Tensor4};
use gaitchd::training::{pairwise_euclidean, pairwise_euclidean_backward, triplet_loss_batch_all};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn set_pool_ignores_frame_order(f in 1usize..6, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps: Vec<Tensor4> = (0..f).map(|_| random_tensor(Shape4::new(1, c, h, w), &mut rng)).collect();
        let (a, _) = set_pool(&maps).unwrap();
        maps.shuffle(&mut rng);
        let (b, _) = set_pool(&maps).unwrap();
        prop_assert_eq!(&a, &b);
        maps.push(random_tensor(Shape4::new(1, c, h, w), &mut rng));
        let (grown, _) = set_pool(&maps).unwrap();
        for (g, o) in grown.data().iter().zip(a.data()) {
            prop_assert!(g >= o);
        }
    }

    #[test]
    fn loss_laws(p in 2usize..4, k in 2usize..4, dim in 1usize..5, margin in 0.01f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p * k;
        let feats: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..p).flat_map(|l| std::iter::repeat_n(l, k)).collect();
        let dist = pairwise_euclidean(&feats, dim).unwrap();
        let loss = triplet_loss_batch_all(&dist, &labels, margin).unwrap();
        prop_assert!(loss.loss >= 0.0);
        // brute-force violation count
        let mut violating = 0;
        for a in 0..n {
            for q in 0..n {
                for m in 0..n {
                    if q != a && labels[q] == labels[a] && labels[m] != labels[a]
                        && margin + dist[a * n + q] - dist[a * n + m] > 0.0 {
                        violating += 1;
                    }
                }
            }
        }
        prop_assert_eq!(loss.active, violating);
        prop_assert_eq!(loss.loss == 0.0, violating == 0);

        // bijective relabelling: reverse the label order
        let renamed: Vec<usize> = labels.iter().map(|&l| 100 + p - l).collect();
        let again = triplet_loss_batch_all(&dist, &renamed, margin).unwrap();
        prop_assert_eq!(again.loss, loss.loss);
        prop_assert_eq!(again.active, loss.active);
    }

    #[test]
    /// The loss still pulls on a zeroed row of `Sum` (other samples keep it),
    /// but nothing of that reaches the backbone features.
    fn dropped_rows_get_no_loss_gradient(d in 0usize..=32, w in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h) = (4, 2, 32);
        let x = random_tensor(Shape4::new(n, c, h, w), &mut rng);
        let masks: Vec<_> = (0..n).map(|_| make_chd_mask(h, d, &mut rng).unwrap()).collect();
        let out = hd_forward_with_masks(&x, masks.clone(), false).unwrap();
        let dim = c * h;
        let dist = pairwise_euclidean(out.sum.data(), dim).unwrap();
        let loss = triplet_loss_batch_all(&dist, &[0, 0, 1, 1], 0.5).unwrap();
        let g_sum = pairwise_euclidean_backward(out.sum.data(), dim, &dist, &loss.grad).unwrap();
        let g_sum = Tensor4::new(out.sum.shape(), g_sum).unwrap();
        let g_in = hd_backward(&out.record, &g_sum).unwrap();
        for (i, m) in masks.iter().enumerate() {
            for &r in m.dropped_rows() {
                for ch in 0..c {
                    for col in 0..w {
                        prop_assert_eq!(g_in.get(i, ch, r, col), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn backbone_output_height_is_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (widths, mgp) in [(vec![1], false), (vec![2, 3], true), (vec![3, 2, 4], false), (vec![2, 2, 2, 2], true)] {
        let cfg = BackboneConfig { widths, mgp_branch: mgp, ..BackboneConfig::default() };
        let params = init_params(&cfg, &mut rng).unwrap();
        let frames: Vec<Tensor4> = (0..3)
            .map(|_| Tensor4::new(frame_shape(), (0..frame_shape().len()).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let (feat, _) = backbone_forward(&[frames.clone(), frames.iter().rev().cloned().collect()], &params).unwrap();
        assert_eq!(feat.shape().n, 2);
        assert_eq!(feat.sample(0), feat.sample(1));
        assert_eq!(feat.shape().h, FEATURE_HEIGHT);
        assert_eq!(feat.shape().c, cfg.output_channels());
    }
}
