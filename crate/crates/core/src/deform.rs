//! Plane-factorized bidirectional deformation field over (x, y, τ).
//!
//! Three feature planes over (x,y), (x,τ) and (y,τ) are sampled bilinearly,
//! multiplied channel-wise and decoded by a small perceptron into a position
//! offset, a log-scaling offset and one opacity-logit offset per Gaussian slot.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::floor;
use crate::mlp::{Mlp, MlpGrad};
use crate::scene::AnchorPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformConfig {
    pub resolution: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Weight of the `‖delta(·, 0)‖²` penalty used while training the field.
    pub lambda_identity: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig { resolution: 16, channels: 8, hidden: 32, lambda_identity: 1e-2 }
    }
}

/// Plane indices.
pub const PLANE_XY: usize = 0;
pub const PLANE_XT: usize = 1;
pub const PLANE_YT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub owner: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Each plane is `[resolution, resolution, channels]`, first axis the plane's first coordinate.
    pub planes: [Vec<f64>; 3],
    /// Fused features → `[Δx, Δy, Δlog_sx, Δlog_sy, Δo_1 .. Δo_I]`.
    pub mlp: Mlp,
    /// Scene box the spatial axes span.
    pub bbox_min: [f64; 2],
    pub bbox_max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDelta {
    pub position: [f64; 2],
    pub log_scaling: [f64; 2],
    pub opacity: Vec<f64>,
}

impl DeformationDelta {
    pub fn zero(n_slots: usize) -> Self {
        DeformationDelta { position: [0.0; 2], log_scaling: [0.0; 2], opacity: vec![0.0; n_slots] }
    }

    fn from_output(out: &[f64]) -> Self {
        DeformationDelta { position: [out[0], out[1]], log_scaling: [out[2], out[3]], opacity: out[4..].to_vec() }
    }

    pub fn negated(&self) -> Self {
        DeformationDelta {
            position: [-self.position[0], -self.position[1]],
            log_scaling: [-self.log_scaling[0], -self.log_scaling[1]],
            opacity: self.opacity.iter().map(|v| -v).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.position.iter().chain(&self.log_scaling).chain(&self.opacity).map(|v| v * v).sum()
    }
}

/// Geometry of an anchor after deformation; features are not deformed.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedAnchor {
    pub position: [f64; 2],
    pub log_scaling: [f64; 2],
    /// Added to each slot's decoded opacity logit.
    pub opacity_logit: Vec<f64>,
}

impl DeformedAnchor {
    pub fn of(anchor: &AnchorPoint) -> Self {
        DeformedAnchor {
            position: anchor.position,
            log_scaling: anchor.log_scaling,
            opacity_logit: vec![0.0; anchor.offsets.len()],
        }
    }

    pub fn apply(&self, delta: &DeformationDelta) -> Self {
        DeformedAnchor {
            position: [self.position[0] + delta.position[0], self.position[1] + delta.position[1]],
            log_scaling: [self.log_scaling[0] + delta.log_scaling[0], self.log_scaling[1] + delta.log_scaling[1]],
            opacity_logit: self.opacity_logit.iter().zip(&delta.opacity).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Deforms an anchor: position and log-scaling shift, opacity logits shift.
pub fn apply(anchor: &AnchorPoint, delta: &DeformationDelta) -> DeformedAnchor {
    DeformedAnchor::of(anchor).apply(delta)
}

/// `τ = (t - t_n) / GOP`, defined on the bidirectional window of key frame `t_n`.
pub fn normalize_time(t: usize, t_n: usize, gop: usize, total: usize) -> Result<f64> {
    if gop == 0 || total == 0 {
        return Err(Error::invalid("gop and frame count must be positive"));
    }
    let lo = t_n.saturating_sub(gop);
    let hi = (t_n + gop).min(total - 1);
    if t < lo || t > hi {
        return Err(Error::OutOfWindow { t, lo, hi });
    }
    Ok((t as f64 - t_n as f64) / gop as f64)
}

/// Bilinear stencil on one plane: base node and fractional weights.
#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    i: usize,
    j: usize,
    fi: f64,
    fj: f64,
}

fn axis(u: f64, res: usize) -> (usize, f64) {
    let g = u.clamp(0.0, 1.0) * (res - 1) as f64;
    let i = (floor(g) as usize).min(res - 2);
    (i, g - i as f64)
}

/// Forward values kept for the backward pass of one query.
#[derive(Debug, Clone)]
pub struct QueryTape {
    stencils: [Stencil; 3],
    samples: [Vec<f64>; 3],
    fused: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub planes: [Vec<f64>; 3],
    pub mlp: MlpGrad,
}

impl FieldGrad {
    pub fn zeros(f: &DeformationField) -> Self {
        FieldGrad {
            planes: [vec![0.0; f.planes[0].len()], vec![0.0; f.planes[1].len()], vec![0.0; f.planes[2].len()]],
            mlp: MlpGrad::zeros(&f.mlp),
        }
    }
}

impl DeformationField {
    /// Identity field: spatial plane uniform in [0.1, 0.5], time planes at 1, zero output layer.
    pub fn new(owner: usize, n_slots: usize, cfg: &DeformConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.resolution.max(2);
        let c = cfg.channels;
        let xy = (0..r * r * c).map(|_| rng.random_range(0.1..0.5)).collect();
        let mut mlp = Mlp::random(c, cfg.hidden, 4 + n_slots, 0.0, &mut rng);
        mlp.w2.iter_mut().for_each(|w| *w = 0.0);
        DeformationField {
            owner,
            resolution: r,
            channels: c,
            planes: [xy, vec![1.0; r * r * c], vec![1.0; r * r * c]],
            mlp,
            bbox_min: [0.0, 0.0],
            bbox_max: [1.0, 1.0],
        }
    }

    pub fn n_slots(&self) -> usize {
        self.mlp.out_dim - 4
    }

    pub fn param_count(&self) -> usize {
        self.planes.iter().map(Vec::len).sum::<usize>() + self.mlp.param_count()
    }

    fn coords(&self, p: [f64; 2], tau: f64) -> [(f64, f64); 3] {
        let u = (p[0] - self.bbox_min[0]) / (self.bbox_max[0] - self.bbox_min[0]);
        let v = (p[1] - self.bbox_min[1]) / (self.bbox_max[1] - self.bbox_min[1]);
        let s = (tau.clamp(-1.0, 1.0) + 1.0) * 0.5;
        [(u, v), (u, s), (v, s)]
    }

    /// Raw value of `plane` at node `(i, j)`, channel `c`.
    pub fn node(&self, plane: usize, i: usize, j: usize, c: usize) -> f64 {
        self.planes[plane][(i * self.resolution + j) * self.channels + c]
    }

    fn sample(&self, plane: usize, a: f64, b: f64, out: &mut [f64]) -> Stencil {
        let r = self.resolution;
        let (i, fi) = axis(a, r);
        let (j, fj) = axis(b, r);
        let grid = &self.planes[plane];
        let ch = self.channels;
        let at = |ii: usize, jj: usize| &grid[(ii * r + jj) * ch..(ii * r + jj + 1) * ch];
        let (n00, n01, n10, n11) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
        let (w00, w01, w10, w11) = ((1.0 - fi) * (1.0 - fj), (1.0 - fi) * fj, fi * (1.0 - fj), fi * fj);
        for c in 0..ch {
            out[c] = w00 * n00[c] + w01 * n01[c] + w10 * n10[c] + w11 * n11[c];
        }
        Stencil { i, j, fi, fj }
    }

    /// Fused per-channel feature at `(p, τ)`.
    pub fn features(&self, p: [f64; 2], tau: f64) -> Vec<f64> {
        self.query_with_tape(p, tau).1.fused
    }

    pub fn query(&self, p: [f64; 2], tau: f64) -> DeformationDelta {
        self.query_with_tape(p, tau).0
    }

    pub fn query_with_tape(&self, p: [f64; 2], tau: f64) -> (DeformationDelta, QueryTape) {
        let ch = self.channels;
        let coords = self.coords(p, tau);
        let mut samples = [vec![0.0; ch], vec![0.0; ch], vec![0.0; ch]];
        let mut stencils = [Stencil::default(); 3];
        for k in 0..3 {
            stencils[k] = self.sample(k, coords[k].0, coords[k].1, &mut samples[k]);
        }
        let fused: Vec<f64> = (0..ch).map(|c| samples[0][c] * samples[1][c] * samples[2][c]).collect();
        let mut hidden = vec![0.0; self.mlp.hidden];
        let mut out = vec![0.0; self.mlp.out_dim];
        self.mlp.forward_into(&fused, &mut hidden, &mut out);
        (DeformationDelta::from_output(&out), QueryTape { stencils, samples, fused, hidden })
    }

    /// Adds the gradient of a loss with output gradient `dout` (`[Δp, Δℓ, Δo..]` layout).
    pub fn backward(&self, tape: &QueryTape, dout: &[f64], grad: &mut FieldGrad, train_grids: bool) {
        let ch = self.channels;
        let mut dfused = vec![0.0; ch];
        let mut scratch = vec![0.0; self.mlp.hidden];
        self.mlp.backward(&tape.fused, &tape.hidden, dout, Some(&mut grad.mlp), Some(&mut dfused), &mut scratch);
        if !train_grids {
            return;
        }
        let r = self.resolution;
        for k in 0..3 {
            let (o1, o2) = ((k + 1) % 3, (k + 2) % 3);
            let st = tape.stencils[k];
            let w = [
                ((st.i, st.j), (1.0 - st.fi) * (1.0 - st.fj)),
                ((st.i, st.j + 1), (1.0 - st.fi) * st.fj),
                ((st.i + 1, st.j), st.fi * (1.0 - st.fj)),
                ((st.i + 1, st.j + 1), st.fi * st.fj),
            ];
            for c in 0..ch {
                let ds = dfused[c] * tape.samples[o1][c] * tape.samples[o2][c];
                if ds == 0.0 {
                    continue;
                }
                for &((ii, jj), wt) in &w {
                    grad.planes[k][(ii * r + jj) * ch + c] += ds * wt;
                }
            }
        }
    }
}
