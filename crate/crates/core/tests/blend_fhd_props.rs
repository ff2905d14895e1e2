use morel_core::blend::{blend_weight, blend_weight_grad};
use morel_core::fhd::{assign_levels, grow_and_prune, level_counts, level_weight, levels_from_variances, DensifyConfig};
use morel_core::scene::{init_anchor_space, AnchorShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sort, take the element at rank ⌊q·n⌋ (clamped), then count by strict/non-strict comparison.
fn oracle_counts(var: &[f64], q1: f64, q2: f64) -> [usize; 3] {
    let mut s = var.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let rank = |q: f64| s[((q * n as f64).floor() as usize).min(n - 1)];
    let (t1, t2) = (rank(q1), rank(q2));
    let l0 = var.iter().filter(|&&v| v < t1).count();
    let l2 = var.iter().filter(|&&v| v >= t2).count();
    [l0, n - l0 - l2, l2]
}

fn variance_multiset(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(3..400);
    match rng.random_range(0..3) {
        0 => (0..n).map(|_| rng.random::<f64>()).collect(),
        // Heavy ties.
        1 => (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect(),
        _ => (0..n).map(|_| rng.random::<f64>().powi(6) * 1e3).collect(),
    }
}

#[test]
fn levels_match_nearest_rank_oracle_on_1000_multisets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for trial in 0..1000 {
        let var = variance_multiset(&mut rng);
        let q1 = rng.random_range(0.05..0.9);
        let q2 = rng.random_range(q1 + 0.01..0.99);
        let (levels, _) = levels_from_variances(&var, q1, q2).unwrap();
        let mut got = [0usize; 3];
        for l in &levels {
            got[*l as usize] += 1;
        }
        assert_eq!(got, oracle_counts(&var, q1, q2), "trial {trial}: n={} q=({q1},{q2})", var.len());
    }
}

#[test]
fn distinct_variances_split_at_floor_ranks() {
    // 0.6 and 0.9 of 100 distinct values: 60 / 30 / 10.
    let var: Vec<f64> = (1..=100).rev().map(|v| v as f64).collect();
    let (levels, th) = levels_from_variances(&var, 0.6, 0.9).unwrap();
    let mut c = [0; 3];
    for l in levels {
        c[l as usize] += 1;
    }
    assert_eq!(c, [60, 30, 10]);
    assert_eq!((th.tau1, th.tau2), (61.0, 91.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn blend_weight_is_bounded(o in -3.0f64..3.0, d in 1e-6f64..50.0, tau in -1.0f64..1.0, lambda in 1e-3f64..10.0) {
        let w = blend_weight(o, d, tau, lambda).unwrap();
        prop_assert!(w > 0.0 || (lambda * d * (tau - o).abs()) > 700.0);
        prop_assert!(w <= 1.0);
    }

    #[test]
    fn blend_weight_is_symmetric_about_offset(o in -1.0f64..1.0, d in 0.01f64..10.0, tau in -1.0f64..1.0) {
        let a = blend_weight(o, d, tau, 2.0).unwrap();
        let b = blend_weight(o, d, 2.0 * o - tau, 2.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn blend_weight_peaks_at_offset(o in -1.0f64..1.0, d in 0.01f64..10.0, tau in -1.0f64..1.0) {
        let peak = blend_weight(o, d, o, 2.0).unwrap();
        prop_assert_eq!(peak, 1.0);
        prop_assert!(blend_weight(o, d, tau, 2.0).unwrap() <= peak);
        let (w, _, _) = blend_weight_grad(o, d, tau, 2.0);
        prop_assert_eq!(w, blend_weight(o, d, tau, 2.0).unwrap());
    }

    #[test]
    fn level_weight_is_monotone(j in 0usize..999, lambda1 in 0.0f64..1.0, frac in 0.0f64..1.0) {
        let total = 1000;
        let lambda2 = lambda1 * frac;
        // Non-decreasing in j.
        for l in 0..3u8 {
            let lam = [1.0, lambda1, lambda2][l as usize];
            prop_assert!(level_weight(l, j, total, lam) <= level_weight(l, j + 1, total, lam));
        }
        // Non-increasing in level at fixed j < J.
        let w0 = level_weight(0, j, total, 1.0);
        let w1 = level_weight(1, j, total, lambda1);
        let w2 = level_weight(2, j, total, lambda2);
        prop_assert!(w0 >= w1 && w1 >= w2);
    }

    #[test]
    fn level_partition_covers_every_anchor(seed in any::<u64>(), n in 3usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let mut space = init_anchor_space(&pts, 0.01, seed, AnchorShape::default()).unwrap();
        prop_assume!(space.len() >= 3);
        assign_levels(&mut space, 0.6, 0.9).unwrap();
        prop_assert!(space.anchors.iter().all(|a| matches!(a.level, Some(0..=2))));
        prop_assert_eq!(level_counts(&space).iter().sum::<usize>(), space.len());
    }

    #[test]
    fn grow_and_prune_keeps_cells_unique_and_finite(seed in any::<u64>(), n in 3usize..60, voxel in 0.02f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let mut space = init_anchor_space(&pts, voxel, seed, AnchorShape::default()).unwrap();
        prop_assume!(space.len() >= 3);
        assign_levels(&mut space, 0.6, 0.9).unwrap();
        let cfg = DensifyConfig { success_min: 1, ..DensifyConfig::default() };
        for round in 0..3 {
            for a in space.anchors.iter_mut() {
                for o in a.offsets.iter_mut() {
                    *o = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                }
                a.accum_count = rng.random_range(0..5);
                a.accum_grad = rng.random_range(0.0..1e-3) * a.accum_count as f64;
                a.opacity_stat = rng.random_range(0.0..0.02);
            }
            let before = space.len();
            let rep = grow_and_prune(&mut space, &cfg, round % 2 == 0, &mut rng);
            prop_assert_eq!(rep.total, before + rep.grown - rep.pruned);
            prop_assert_eq!(rep.origin.len(), space.len());
            prop_assert!(space.cells_unique());
            for a in &space.anchors {
                prop_assert!(a.position.iter().chain(&a.log_scaling).all(|v| v.is_finite()));
                prop_assert!(a.feature.iter().all(|v| v.is_finite()));
                prop_assert!(a.offsets.iter().flatten().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn blend_weight_closed_form_value() {
    // |τ-o|·λ·d = 1 gives exp(-1).
    let w = blend_weight(0.25, 1.0, 0.75, 2.0).unwrap();
    assert!((w - (-1.0f64).exp()).abs() <= 1e-12);
}

#[test]
fn level_weight_endpoints() {
    for lam in [0.0, 0.25, 0.5, 0.9] {
        for l in 1..3u8 {
            assert_eq!(level_weight(l, 0, 500, lam), lam);
            assert_eq!(level_weight(l, 500, 500, lam), 1.0);
        }
        assert_eq!(level_weight(0, 0, 500, lam), 1.0);
        assert_eq!(level_weight(0, 250, 500, lam), 1.0);
    }
}
