//! Feature-variance-guided hierarchical densification.
//!
//! Anchors are split into three levels by the variance of their feature
//! vectors. The gradient statistic that drives growth is scaled per level by a
//! factor that ramps from `λ_L` to 1 over a stage, so fine-level anchors only
//! grow once coarse structure has settled.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::AnchorObservations;
use crate::scene::{cell_of, AnchorPoint, AnchorSpace, BlendParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelThresholds {
    pub q1: f64,
    pub q2: f64,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    /// When false, every anchor is treated as level 0 (plain densification).
    pub enabled: bool,
    pub q1: f64,
    pub q2: f64,
    pub grad_threshold: f64,
    pub opacity_threshold: f64,
    pub success_min: u32,
    /// `λ_L` for levels 1 and 2.
    pub lambda: [f64; 2],
    pub interval: usize,
    /// Fraction at the end of a deformation window during which nothing is pruned.
    pub prune_freeze: f64,
    pub feature_noise: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            q1: 0.6,
            q2: 0.9,
            grad_threshold: 2.5e-5,
            opacity_threshold: 5e-3,
            success_min: 50,
            lambda: [0.5, 0.25],
            interval: 100,
            prune_freeze: 0.2,
            feature_noise: 0.01,
        }
    }
}

/// Population variance of the feature components.
pub fn feature_variance(f: &[f64]) -> f64 {
    if f.is_empty() {
        return 0.0;
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Nearest-rank quantile: the element at sorted index `min(⌊q·n⌋, n-1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64) as usize).min(n - 1);
    sorted[idx]
}

/// Levels from variances: 0 below `τ1`, 1 in `[τ1, τ2)`, 2 at or above `τ2`.
pub fn levels_from_variances(var: &[f64], q1: f64, q2: f64) -> Result<(Vec<u8>, LevelThresholds)> {
    if var.len() < 3 {
        return Err(Error::invalid("level assignment needs at least three anchors"));
    }
    if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
        return Err(Error::invalid("quantiles must satisfy 0 < q1 < q2 < 1"));
    }
    if var.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature variance"));
    }
    let mut sorted = var.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau1 = quantile(&sorted, q1);
    let tau2 = quantile(&sorted, q2);
    let levels = var
        .iter()
        .map(|&v| {
            if v < tau1 {
                0
            } else if v < tau2 {
                1
            } else {
                2
            }
        })
        .collect();
    Ok((levels, LevelThresholds { q1, q2, tau1, tau2 }))
}

/// Tags every anchor of `space` with its level.
pub fn assign_levels(space: &mut AnchorSpace, q1: f64, q2: f64) -> Result<LevelThresholds> {
    let var: Vec<f64> = space.anchors.iter().map(|a| feature_variance(&a.feature)).collect();
    let (levels, th) = levels_from_variances(&var, q1, q2)?;
    for (a, l) in space.anchors.iter_mut().zip(levels) {
        a.level = Some(l);
    }
    Ok(th)
}

/// Stage-progress weight of the gradient statistic: 1 for level 0, else `λ + (1-λ)·j/J`.
pub fn level_weight(level: u8, j: usize, total: usize, lambda: f64) -> f64 {
    if level == 0 {
        return 1.0;
    }
    let eta = if total == 0 { 1.0 } else { (j as f64 / total as f64).min(1.0) };
    lambda + (1.0 - lambda) * eta
}

fn weight_for(a: &AnchorPoint, j: usize, total: usize, cfg: &DensifyConfig) -> f64 {
    match (cfg.enabled, a.level) {
        (true, Some(l)) if l > 0 => level_weight(l, j, total, cfg.lambda[(l as usize - 1).min(1)]),
        _ => 1.0,
    }
}

/// Folds one step's observations into the anchors' running statistics.
pub fn accumulate_stats(
    space: &mut AnchorSpace,
    obs: &AnchorObservations,
    j: usize,
    total: usize,
    cfg: &DensifyConfig,
) -> Result<()> {
    if obs.visible.len() != space.len() || obs.screen_grad.len() != space.len() {
        return Err(Error::invalid("observations do not match the anchor count"));
    }
    for (k, a) in space.anchors.iter_mut().enumerate() {
        if !obs.visible[k] {
            continue;
        }
        a.accum_grad += weight_for(a, j, total, cfg) * obs.screen_grad[k];
        a.accum_count += 1;
        a.opacity_stat = a.opacity_stat.max(obs.max_opacity[k]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyReport {
    pub grown: usize,
    pub pruned: usize,
    pub total: usize,
    /// For each anchor after the pass, the index it had before, or `None` if new.
    pub origin: Vec<Option<usize>>,
}

/// Grows anchors into empty cells around high-gradient anchors and prunes
/// anchors that were seen often but stayed nearly transparent. Statistics are
/// reset afterwards.
pub fn grow_and_prune<R: Rng + ?Sized>(
    space: &mut AnchorSpace,
    cfg: &DensifyConfig,
    allow_prune: bool,
    rng: &mut R,
) -> DensifyReport {
    let voxel = space.grid_voxel;
    let mut occupied: BTreeSet<(i64, i64)> = space.anchors.iter().map(|a| cell_of(a.position, voxel)).collect();
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).unwrap();
    let mut born = Vec::new();
    for a in &space.anchors {
        if a.accum_count == 0 || a.accum_grad / a.accum_count as f64 <= cfg.grad_threshold {
            continue;
        }
        for c in a.centers() {
            if !(c[0].is_finite() && c[1].is_finite()) {
                continue;
            }
            let cell = cell_of(c, voxel);
            if !occupied.insert(cell) {
                continue;
            }
            born.push(AnchorPoint {
                position: [(cell.0 as f64 + 0.5) * voxel, (cell.1 as f64 + 0.5) * voxel],
                feature: a.feature.iter().map(|v| v + noise.sample(rng)).collect(),
                log_scaling: a.log_scaling,
                offsets: a.offsets.clone(),
                level: a.level,
                blend_fw: BlendParams::default(),
                blend_bw: BlendParams::default(),
                accum_grad: 0.0,
                accum_count: 0,
                opacity_stat: 0.0,
            });
        }
    }
    let before = space.anchors.len();
    let mut origin = Vec::with_capacity(before + born.len());
    let mut kept = Vec::with_capacity(before + born.len());
    for (k, a) in space.anchors.drain(..).enumerate() {
        let prune = allow_prune && a.accum_count >= cfg.success_min && a.opacity_stat < cfg.opacity_threshold;
        if !prune {
            origin.push(Some(k));
            kept.push(a);
        }
    }
    let pruned = before - kept.len();
    let grown = born.len();
    kept.extend(born);
    origin.resize(kept.len(), None);
    space.anchors = kept;
    space.reset_stats();
    DensifyReport { grown, pruned, total: space.anchors.len(), origin }
}

/// Anchor counts per level (unassigned anchors are not counted).
pub fn level_counts(space: &AnchorSpace) -> [usize; 3] {
    let mut c = [0; 3];
    for a in &space.anchors {
        if let Some(l) = a.level {
            c[(l as usize).min(2)] += 1;
        }
    }
    c
}

/// Deterministic helper for tests: level tags of a plain variance list.
pub fn level_histogram(levels: &[u8]) -> [usize; 3] {
    let mut c = [0; 3];
    for &l in levels {
        c[l as usize] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{anchor_at, AnchorShape, SpaceKind};
    use alloc::vec;
    use crate::mlp::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space_with(anchors: Vec<AnchorPoint>, voxel: f64) -> AnchorSpace {
        let sh = AnchorShape::default();
        AnchorSpace { anchors, decoder: Mlp::zeros(18, 32, 32), grid_voxel: voxel, kind: SpaceKind::Global, shape: sh }
    }

    #[test]
    fn one_to_hundred_splits_sixty_thirty_ten() {
        let var: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let (levels, _) = levels_from_variances(&var, 0.6, 0.9).unwrap();
        assert_eq!(level_histogram(&levels), [60, 30, 10]);
    }

    #[test]
    fn equal_variances_all_land_on_top_level() {
        let (levels, _) = levels_from_variances(&[0.3; 10], 0.6, 0.9).unwrap();
        assert!(levels.iter().all(|&l| l == 2));
    }

    #[test]
    fn fewer_than_three_anchors_rejected() {
        assert!(levels_from_variances(&[1.0, 2.0], 0.6, 0.9).is_err());
    }

    #[test]
    fn level_weight_endpoints() {
        assert_eq!(level_weight(0, 17, 100, 0.5), 1.0);
        assert_eq!(level_weight(2, 100, 100, 0.25), 1.0);
        assert_eq!(level_weight(1, 0, 100, 0.5), 0.5);
    }

    #[test]
    fn level_weighting_of_statistics() {
        let sh = AnchorShape::default();
        let mut a0 = anchor_at([0.1, 0.1], sh, -3.0);
        a0.level = Some(0);
        let mut a2 = anchor_at([0.5, 0.5], sh, -3.0);
        a2.level = Some(2);
        let mut s = space_with(vec![a0, a2], 0.05);
        let obs = AnchorObservations { screen_grad: vec![1.0, 1.0], visible: vec![true, true], max_opacity: vec![0.5, 0.5] };
        let cfg = DensifyConfig::default();
        accumulate_stats(&mut s, &obs, 0, 10, &cfg).unwrap();
        assert_eq!(s.anchors[0].accum_grad, 4.0 * s.anchors[1].accum_grad);
        s.reset_stats();
        accumulate_stats(&mut s, &obs, 10, 10, &cfg).unwrap();
        assert_eq!(s.anchors[0].accum_grad, s.anchors[1].accum_grad);
    }

    #[test]
    fn invisible_anchor_keeps_stats() {
        let sh = AnchorShape::default();
        let mut s = space_with(vec![anchor_at([0.1, 0.1], sh, -3.0)], 0.05);
        let obs = AnchorObservations { screen_grad: vec![3.0], visible: vec![false], max_opacity: vec![0.9] };
        accumulate_stats(&mut s, &obs, 0, 10, &DensifyConfig::default()).unwrap();
        assert_eq!((s.anchors[0].accum_grad, s.anchors[0].accum_count, s.anchors[0].opacity_stat), (0.0, 0, 0.0));
    }

    #[test]
    fn zero_stats_change_nothing() {
        let sh = AnchorShape::default();
        let mut s = space_with(vec![anchor_at([0.1, 0.1], sh, -3.0), anchor_at([0.3, 0.1], sh, -3.0)], 0.05);
        let before = s.clone();
        let r = grow_and_prune(&mut s, &DensifyConfig::default(), true, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((r.grown, r.pruned, r.total), (0, 0, 2));
        assert_eq!(s, before);
    }

    #[test]
    fn grows_into_two_new_cells() {
        let sh = AnchorShape { feature_dim: 16, n_offsets: 4, hidden: 32 };
        let voxel = 0.1;
        let mut a = anchor_at([0.05, 0.05], sh, 0.0); // scaling 1
        // two Gaussians stay in the anchor's cell, two land in cells (1,0) and (0,2)
        a.offsets = vec![[0.0, 0.0], [0.01, 0.01], [0.12, 0.0], [0.0, 0.17]];
        a.accum_grad = 1.0;
        a.accum_count = 1;
        let mut s = space_with(vec![a], voxel);
        let r = grow_and_prune(&mut s, &DensifyConfig::default(), true, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r.grown, 2);
        assert_eq!(s.len(), 3);
        assert!(s.cells_unique());
        assert_eq!(r.origin, vec![Some(0), None, None]);
    }

    #[test]
    fn prunes_transparent_well_observed_anchor() {
        let sh = AnchorShape::default();
        let mut a = anchor_at([0.1, 0.1], sh, -3.0);
        a.accum_count = 200;
        a.opacity_stat = 0.001;
        let b = anchor_at([0.5, 0.5], sh, -3.0);
        let mut s = space_with(vec![a, b], 0.05);
        let r = grow_and_prune(&mut s, &DensifyConfig::default(), true, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!((r.pruned, r.total), (1, 1));
        assert_eq!(r.origin, vec![Some(1)]);
    }

    #[test]
    fn prune_freeze_keeps_anchor() {
        let sh = AnchorShape::default();
        let mut a = anchor_at([0.1, 0.1], sh, -3.0);
        a.accum_count = 200;
        a.opacity_stat = 0.001;
        let mut s = space_with(vec![a], 0.05);
        let r = grow_and_prune(&mut s, &DensifyConfig::default(), false, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(r.pruned, 0);
    }
}
