//! Anchor-point scene representation and the neural-Gaussian decoder.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::math::{exp, floor, sigmoid, sin_cos, softplus, softplus_inv, sqrt};
use crate::mlp::Mlp;
use crate::{Error, Result};

/// Decoder outputs per Gaussian slot: rgb, opacity, rotation, two scale multipliers, depth key.
pub const ATTRS_PER_GAUSSIAN: usize = 8;
pub(crate) const A_COLOR: usize = 0;
pub(crate) const A_OPACITY: usize = 3;
pub(crate) const A_ROT: usize = 4;
pub(crate) const A_SCALE: usize = 5;
pub(crate) const A_DEPTH: usize = 7;
/// Lower bound of the per-Gaussian scale multiplier, keeps covariances well conditioned.
pub const SCALE_FLOOR: f64 = 0.02;

/// Hyper-parameters that fix array shapes of an anchor space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorShape {
    pub feature_dim: usize,
    pub n_offsets: usize,
    pub hidden: usize,
}

impl Default for AnchorShape {
    fn default() -> Self {
        AnchorShape { feature_dim: 16, n_offsets: 4, hidden: 32 }
    }
}

/// Temporal-opacity parameters of one direction. The decay is stored unconstrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendParams {
    pub offset: f64,
    pub decay_raw: f64,
}

impl BlendParams {
    pub fn new(offset: f64, decay: f64) -> Self {
        BlendParams { offset, decay_raw: softplus_inv(decay) }
    }

    #[inline]
    pub fn decay(&self) -> f64 {
        softplus(self.decay_raw)
    }
}

impl Default for BlendParams {
    fn default() -> Self {
        BlendParams::new(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPoint {
    pub position: [f64; 2],
    pub feature: Vec<f64>,
    /// Log of the per-axis scaling; the scaling itself is `exp` of this.
    pub log_scaling: [f64; 2],
    /// `n_offsets` offsets, expressed in units of the scaling.
    pub offsets: Vec<[f64; 2]>,
    pub level: Option<u8>,
    pub blend_fw: BlendParams,
    pub blend_bw: BlendParams,
    pub accum_grad: f64,
    pub accum_count: u32,
    pub opacity_stat: f64,
}

impl AnchorPoint {
    pub fn scaling(&self) -> [f64; 2] {
        [exp(self.log_scaling[0]), exp(self.log_scaling[1])]
    }

    pub fn reset_stats(&mut self) {
        self.accum_grad = 0.0;
        self.accum_count = 0;
        self.opacity_stat = 0.0;
    }

    /// Canonical Gaussian centers `p + s ⊙ O_i`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let s = self.scaling();
        self.offsets
            .iter()
            .map(|o| [self.position[0] + s[0] * o[0], self.position[1] + s[1] * o[1]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Global,
    Key { n: usize, t_n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpace {
    pub anchors: Vec<AnchorPoint>,
    pub decoder: Mlp,
    pub grid_voxel: f64,
    pub kind: SpaceKind,
    pub shape: AnchorShape,
}

/// Renderable 2D Gaussian in scene units. `cov` holds `(xx, xy, yy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianAttributes {
    pub center: [f64; 2],
    pub cov: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth_key: f64,
}

impl GaussianAttributes {
    pub fn isotropic(center: [f64; 2], sigma: f64, color: [f64; 3], opacity: f64, depth_key: f64) -> Self {
        GaussianAttributes { center, cov: [sigma * sigma, 0.0, sigma * sigma], color, opacity, depth_key }
    }

    /// Smaller eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let m = 0.5 * (a + c);
        let d = sqrt((0.5 * (a - c)) * (0.5 * (a - c)) + b * b);
        m - d
    }
}

/// `R(θ) diag(sx², sy²) R(θ)ᵀ` as `(xx, xy, yy)`.
pub fn rotated_covariance(theta: f64, sx: f64, sy: f64) -> [f64; 3] {
    let (s, c) = sin_cos(theta);
    let (x2, y2) = (sx * sx, sy * sy);
    [c * c * x2 + s * s * y2, c * s * (x2 - y2), s * s * x2 + c * c * y2]
}

pub(crate) fn cell_of(p: [f64; 2], voxel: f64) -> (i64, i64) {
    (floor(p[0] / voxel) as i64, floor(p[1] / voxel) as i64)
}

impl AnchorSpace {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.shape.n_offsets
    }

    pub fn levels_assigned(&self) -> bool {
        self.anchors.iter().all(|a| a.level.is_some())
    }

    /// True when no two anchors share a `grid_voxel` cell.
    pub fn cells_unique(&self) -> bool {
        let mut seen = BTreeMap::new();
        self.anchors.iter().all(|a| seen.insert(cell_of(a.position, self.grid_voxel), ()).is_none())
    }

    pub fn reset_stats(&mut self) {
        for a in &mut self.anchors {
            a.reset_stats();
        }
    }

    /// The `I` Gaussians of anchor `k` as seen from a view with code `view_code`.
    pub fn decode_gaussians(&self, k: usize, view_code: [f64; 2]) -> Result<Vec<GaussianAttributes>> {
        let a = self.anchors.get(k).ok_or_else(|| Error::invalid(format!("anchor {k} out of range")))?;
        decode_gaussians(a, &self.decoder, view_code)
    }

    /// Copy of a level-assigned global space re-keyed to key-frame `n`.
    pub fn derive_keyframe_space(&self, n: usize, gop: usize) -> Result<AnchorSpace> {
        if self.kind != SpaceKind::Global {
            return Err(Error::PreconditionViolation("key spaces derive from the global space".into()));
        }
        if !self.levels_assigned() {
            return Err(Error::PreconditionViolation("levels are not assigned".into()));
        }
        let mut key = self.clone();
        key.kind = SpaceKind::Key { n, t_n: n * gop };
        for a in &mut key.anchors {
            a.reset_stats();
            a.blend_fw = BlendParams::default();
            a.blend_bw = BlendParams::default();
        }
        Ok(key)
    }
}

/// Decodes one anchor into its `I` neural Gaussians.
pub fn decode_gaussians(a: &AnchorPoint, decoder: &Mlp, view_code: [f64; 2]) -> Result<Vec<GaussianAttributes>> {
    let f = a.feature.len();
    let i_n = a.offsets.len();
    if decoder.in_dim != f + 2 || decoder.out_dim != i_n * ATTRS_PER_GAUSSIAN {
        return Err(Error::invalid(format!(
            "decoder {}→{} does not fit feature {f} and {i_n} offsets",
            decoder.in_dim, decoder.out_dim
        )));
    }
    let mut input = Vec::with_capacity(f + 2);
    input.extend_from_slice(&a.feature);
    input.extend_from_slice(&view_code);
    let out = decoder.forward(&input);
    let s = a.scaling();
    Ok((0..i_n)
        .map(|i| {
            let o = &out[i * ATTRS_PER_GAUSSIAN..(i + 1) * ATTRS_PER_GAUSSIAN];
            let mx = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sigmoid(o[A_SCALE]);
            let my = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sigmoid(o[A_SCALE + 1]);
            GaussianAttributes {
                center: [a.position[0] + s[0] * a.offsets[i][0], a.position[1] + s[1] * a.offsets[i][1]],
                cov: rotated_covariance(o[A_ROT], s[0] * mx, s[1] * my),
                color: [sigmoid(o[A_COLOR]), sigmoid(o[A_COLOR + 1]), sigmoid(o[A_COLOR + 2])],
                opacity: sigmoid(o[A_OPACITY]),
                depth_key: o[A_DEPTH],
            }
        })
        .collect())
}

/// One anchor per occupied `grid_voxel` cell, placed at the centroid of the cell's points.
pub fn init_anchor_space(points: &[[f64; 2]], grid_voxel: f64, seed: u64, shape: AnchorShape) -> Result<AnchorSpace> {
    if points.is_empty() {
        return Err(Error::invalid("empty point list"));
    }
    if !(grid_voxel > 0.0) {
        return Err(Error::invalid("grid_voxel must be positive"));
    }
    let mut cells: BTreeMap<(i64, i64), ([f64; 2], usize)> = BTreeMap::new();
    for p in points {
        let e = cells.entry(cell_of(*p, grid_voxel)).or_insert(([0.0, 0.0], 0));
        e.0[0] += p[0];
        e.0[1] += p[1];
        e.1 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = Normal::new(0.0, 0.1).unwrap();
    let ln_voxel = crate::math::ln(grid_voxel);
    let anchors = cells
        .values()
        .map(|(sum, cnt)| AnchorPoint {
            position: [sum[0] / *cnt as f64, sum[1] / *cnt as f64],
            feature: (0..shape.feature_dim).map(|_| feat.sample(&mut rng)).collect(),
            log_scaling: [ln_voxel, ln_voxel],
            offsets: (0..shape.n_offsets)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect(),
            level: None,
            blend_fw: BlendParams::default(),
            blend_bw: BlendParams::default(),
            accum_grad: 0.0,
            accum_count: 0,
            opacity_stat: 0.0,
        })
        .collect();
    let decoder = Mlp::random(
        shape.feature_dim + 2,
        shape.hidden,
        shape.n_offsets * ATTRS_PER_GAUSSIAN,
        0.1,
        &mut rng,
    );
    Ok(AnchorSpace { anchors, decoder, grid_voxel, kind: SpaceKind::Global, shape })
}

/// Blank anchor used by tests and densification.
pub fn anchor_at(position: [f64; 2], shape: AnchorShape, log_scaling: f64) -> AnchorPoint {
    AnchorPoint {
        position,
        feature: vec![0.0; shape.feature_dim],
        log_scaling: [log_scaling, log_scaling],
        offsets: vec![[0.0, 0.0]; shape.n_offsets],
        level: None,
        blend_fw: BlendParams::default(),
        blend_bw: BlendParams::default(),
        accum_grad: 0.0,
        accum_count: 0,
        opacity_stat: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn shape() -> AnchorShape {
        AnchorShape::default()
    }

    #[test]
    fn points_in_one_cell_merge_to_centroid() {
        let pts = [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]];
        let s = init_anchor_space(&pts, 1.0, 0, shape()).unwrap();
        assert_eq!(s.len(), 1);
        let p = s.anchors[0].position;
        assert!((p[0] - 0.4).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distinct_cells_give_distinct_anchors() {
        let s = init_anchor_space(&[[0.1, 0.1], [1.9, 1.9]], 1.0, 0, shape()).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.cells_unique());
    }

    #[test]
    fn empty_points_rejected() {
        assert!(matches!(init_anchor_space(&[], 1.0, 0, shape()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn anchor_count_matches_occupied_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<[f64; 2]> =
            (0..10_000).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
        let mut occupied = BTreeSet::new();
        for p in &pts {
            occupied.insert(((p[0] * 2.0) as i64, (p[1] * 2.0) as i64));
        }
        let s = init_anchor_space(&pts, 0.5, 1, shape()).unwrap();
        assert_eq!(s.len(), occupied.len());
        assert!(s.cells_unique());
    }

    #[test]
    fn zero_offsets_put_centers_on_anchor() {
        let mut s = init_anchor_space(&[[0.3, 0.7]], 0.1, 2, shape()).unwrap();
        s.anchors[0].offsets.iter_mut().for_each(|o| *o = [0.0, 0.0]);
        for g in s.decode_gaussians(0, [0.1, 0.2]).unwrap() {
            assert_eq!(g.center, s.anchors[0].position);
        }
    }

    #[test]
    fn zero_decoder_gives_half_opacity_and_gray() {
        let mut s = init_anchor_space(&[[0.3, 0.7]], 0.1, 2, shape()).unwrap();
        s.decoder = Mlp::zeros(18, 32, 32);
        for g in s.decode_gaussians(0, [0.0, 0.0]).unwrap() {
            assert_eq!(g.opacity, 0.5);
            assert_eq!(g.color, [0.5; 3]);
        }
    }

    #[test]
    fn centers_follow_scaled_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 2]> = (0..5).map(|_| [rng.random(), rng.random()]).collect();
        let mut s = init_anchor_space(&pts, 0.05, 7, shape()).unwrap();
        for a in &mut s.anchors {
            a.log_scaling = [rng.random_range(-4.0..-1.0), rng.random_range(-4.0..-1.0)];
        }
        for (k, a) in s.anchors.iter().enumerate() {
            let gs = s.decode_gaussians(k, [0.2, -0.1]).unwrap();
            for (i, g) in gs.iter().enumerate() {
                let ex = a.position[0] + a.log_scaling[0].exp() * a.offsets[i][0];
                let ey = a.position[1] + a.log_scaling[1].exp() * a.offsets[i][1];
                assert!((g.center[0] - ex).abs() < 1e-12);
                assert!((g.center[1] - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_shape_mismatch_is_invalid() {
        let s = init_anchor_space(&[[0.3, 0.7]], 0.1, 2, shape()).unwrap();
        let bad = Mlp::zeros(10, 4, 32);
        assert!(decode_gaussians(&s.anchors[0], &bad, [0.0, 0.0]).is_err());
    }

    #[test]
    fn keyframe_space_requires_levels() {
        let s = init_anchor_space(&[[0.3, 0.7]], 0.1, 2, shape()).unwrap();
        assert!(matches!(s.derive_keyframe_space(0, 40), Err(Error::PreconditionViolation(_))));
    }

    #[test]
    fn keyframe_space_copies_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..2000).map(|_| [rng.random(), rng.random()]).collect();
        let mut g = init_anchor_space(&pts, 0.04, 3, shape()).unwrap();
        for a in &mut g.anchors {
            a.level = Some(1);
            a.accum_grad = 3.0;
            a.blend_fw = BlendParams::new(0.3, 2.0);
        }
        let k = g.derive_keyframe_space(3, 40).unwrap();
        assert_eq!(k.kind, SpaceKind::Key { n: 3, t_n: 120 });
        assert_eq!(k.len(), g.len());
        for (a, b) in g.anchors.iter().zip(&k.anchors) {
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.position, b.position);
            assert_eq!(a.offsets, b.offsets);
            assert_eq!(b.accum_grad, 0.0);
            assert_eq!(b.blend_fw, BlendParams::default());
        }
        assert_eq!(k.decoder, g.decoder);
        assert_eq!(g.derive_keyframe_space(0, 40).unwrap().kind, SpaceKind::Key { n: 0, t_n: 0 });
    }

    #[test]
    fn default_blend_decay_is_one() {
        assert!((BlendParams::default().decay() - 1.0).abs() < 1e-15);
    }
}
