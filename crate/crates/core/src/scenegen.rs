//! Procedural ground truth: animated Gaussian scenes rendered to multi-view sequences.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{Frame8, Image};
use crate::math::{floor, sin_cos, sqrt};
use crate::render::{render, RenderConfig, ViewTransform};
use crate::scene::{rotated_covariance, GaussianAttributes};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// `start + t · velocity`, velocity in scene units per frame.
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// Counter-clockwise circle; `period` in frames.
    Circular { center: [f64; 2], radius: f64, period: f64, phase: f64 },
    /// Linear interpolation between `(frame, position)` waypoints, held constant outside them.
    Piecewise { waypoints: Vec<(usize, [f64; 2])> },
}

impl Trajectory {
    pub fn position(&self, t: usize) -> [f64; 2] {
        let tf = t as f64;
        match self {
            Trajectory::Linear { start, velocity } => [start[0] + tf * velocity[0], start[1] + tf * velocity[1]],
            Trajectory::Circular { center, radius, period, phase } => {
                let (s, c) = sin_cos(phase + core::f64::consts::TAU * tf / period);
                [center[0] + radius * c, center[1] + radius * s]
            }
            Trajectory::Piecewise { waypoints } => {
                let Some(first) = waypoints.first() else { return [0.0, 0.0] };
                if t <= first.0 {
                    return first.1;
                }
                for w in waypoints.windows(2) {
                    let ((t0, p0), (t1, p1)) = (w[0], w[1]);
                    if t <= t1 {
                        let f = if t1 == t0 { 1.0 } else { (t - t0) as f64 / (t1 - t0) as f64 };
                        return [p0[0] + f * (p1[0] - p0[0]), p0[1] + f * (p1[1] - p0[1])];
                    }
                }
                waypoints.last().unwrap().1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub trajectory: Trajectory,
    pub color: [f64; 3],
    /// Standard deviations along the two axes.
    pub sigma: [f64; 2],
    pub opacity: f64,
    /// Present for `appear <= t < disappear`.
    pub appear: usize,
    pub disappear: Option<usize>,
}

impl Actor {
    pub fn present(&self, t: usize) -> bool {
        t >= self.appear && self.disappear.is_none_or(|d| t < d)
    }

    pub fn center_at(&self, t: usize) -> [f64; 2] {
        self.trajectory.position(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub static_count: usize,
    pub palette: Vec<[f64; 3]>,
    /// Range of static Gaussian standard deviations.
    pub size_range: (f64, f64),
    pub actors: Vec<Actor>,
    pub frames: usize,
    pub fps: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            static_count: 40,
            palette: vec![[0.9, 0.3, 0.2], [0.2, 0.7, 0.3], [0.25, 0.4, 0.9], [0.95, 0.85, 0.3], [0.8, 0.8, 0.85]],
            size_range: (0.015, 0.04),
            actors: default_actors(),
            frames: 240,
            fps: 30,
            views: 4,
            width: 128,
            height: 128,
            seed: 2024,
        }
    }
}

/// A circular actor, a fast linear one, and one that appears at frame 100 and leaves at 180.
pub fn default_actors() -> Vec<Actor> {
    vec![
        Actor {
            trajectory: Trajectory::Circular { center: [0.5, 0.5], radius: 0.15, period: 240.0, phase: 0.0 },
            color: [1.0, 0.55, 0.1],
            sigma: [0.035, 0.025],
            opacity: 0.95,
            appear: 0,
            disappear: None,
        },
        Actor {
            trajectory: Trajectory::Linear { start: [0.1, 0.25], velocity: [0.0033, 0.0005] },
            color: [0.1, 0.85, 0.95],
            sigma: [0.03, 0.03],
            opacity: 0.95,
            appear: 0,
            disappear: None,
        },
        Actor {
            trajectory: Trajectory::Piecewise { waypoints: vec![(100, [0.3, 0.75]), (180, [0.6, 0.8])] },
            color: [0.85, 0.2, 0.85],
            sigma: [0.04, 0.03],
            opacity: 0.95,
            appear: 100,
            disappear: Some(180),
        },
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.views == 0 || self.width < 16 || self.height < 16 || self.fps == 0 {
            return Err(Error::invalid("frames, views, fps must be positive and images at least 16×16"));
        }
        if self.palette.is_empty() && self.static_count > 0 {
            return Err(Error::invalid("static layer needs a palette"));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("size range must satisfy 0 < min <= max"));
        }
        for (i, a) in self.actors.iter().enumerate() {
            for t in 0..self.frames {
                if !a.present(t) {
                    continue;
                }
                let p = a.center_at(t);
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    return Err(Error::invalid(format!("actor {i} leaves the unit square at frame {t}")));
                }
            }
        }
        Ok(())
    }

    /// Affine views: small rotations and zooms around the scene center.
    pub fn view_transforms(&self) -> Vec<ViewTransform> {
        (0..self.views)
            .map(|m| {
                let k = m as f64 - (self.views as f64 - 1.0) / 2.0;
                let angle = 0.08 * k;
                let zoom = 1.0 + 0.04 * k;
                let (s, c) = sin_cos(angle);
                let sx = self.width as f64 * zoom;
                let sy = self.height as f64 * zoom;
                let linear = [sx * c, -sx * s, sy * s, sy * c];
                // scene center lands near the image center, shifted a little per view
                let cx = self.width as f64 / 2.0 + 2.0 * k;
                let cy = self.height as f64 / 2.0 - 1.5 * k;
                let translation = [cx - 0.5 * (linear[0] + linear[1]), cy - 0.5 * (linear[2] + linear[3])];
                ViewTransform { linear, translation, width: self.width, height: self.height }
            })
            .collect()
    }
}

/// Multi-view 8-bit ground-truth video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub views: Vec<ViewTransform>,
    /// `frames[view][t]`.
    pub frames: Vec<Vec<Frame8>>,
    pub fps: usize,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, view: usize, t: usize) -> Image {
        self.frames[view][t].to_image()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sequence: FrameSequence,
    /// Oracle Gaussians per frame, static layer first.
    pub oracle: Vec<Vec<GaussianAttributes>>,
}

fn static_layer(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<GaussianAttributes> {
    let jitter = Normal::new(0.0, 0.05).unwrap();
    (0..spec.static_count)
        .map(|_| {
            let base = spec.palette[rng.random_range(0..spec.palette.len())];
            let color = base.map(|c: f64| (c + jitter.sample(rng)).clamp(0.0, 1.0));
            let (lo, hi) = spec.size_range;
            let sx = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let sy = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            GaussianAttributes {
                center: [rng.random_range(0.08..0.92), rng.random_range(0.08..0.92)],
                cov: rotated_covariance(rng.random_range(0.0..core::f64::consts::PI), sx, sy),
                color,
                opacity: rng.random_range(0.6..0.95),
                depth_key: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

/// Oracle state of every frame.
pub fn oracle_states(spec: &SceneSpec) -> Result<Vec<Vec<GaussianAttributes>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let statics = static_layer(spec, &mut rng);
    Ok((0..spec.frames)
        .map(|t| {
            let mut gs = statics.clone();
            for (i, a) in spec.actors.iter().enumerate() {
                if a.present(t) {
                    gs.push(GaussianAttributes {
                        center: a.center_at(t),
                        cov: [a.sigma[0] * a.sigma[0], 0.0, a.sigma[1] * a.sigma[1]],
                        color: a.color,
                        opacity: a.opacity,
                        // actors composite in front of the static layer
                        depth_key: -1.0 - i as f64,
                    });
                }
            }
            gs
        })
        .collect())
}

/// Renders every view of every frame with the crate's own rasterizer.
pub fn generate(spec: &SceneSpec) -> Result<GroundTruth> {
    let oracle = oracle_states(spec)?;
    let views = spec.view_transforms();
    let cfg = RenderConfig::default();
    let mut frames = Vec::with_capacity(views.len());
    for v in &views {
        let mut seq = Vec::with_capacity(spec.frames);
        for gs in &oracle {
            seq.push(Frame8::from_image(&render(gs, v, &cfg)?));
        }
        frames.push(seq);
    }
    Ok(GroundTruth { sequence: FrameSequence { views, frames, fps: spec.fps }, oracle })
}

/// Points drawn from the oracle Gaussians of the listed frames, merged.
pub fn sample_point_cloud(
    oracle: &[Vec<GaussianAttributes>],
    frames_at: &[usize],
    per_frame: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    if frames_at.is_empty() {
        return Err(Error::invalid("no frames to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut pts = Vec::with_capacity(frames_at.len() * per_frame);
    for &t in frames_at {
        let gs = oracle.get(t).ok_or_else(|| Error::invalid(format!("frame {t} outside the sequence")))?;
        if gs.is_empty() {
            continue;
        }
        for _ in 0..per_frame {
            let g = &gs[rng.random_range(0..gs.len())];
            // Cholesky factor of the covariance
            let l11 = sqrt(g.cov[0]);
            let l21 = g.cov[1] / l11;
            let l22 = sqrt((g.cov[2] - l21 * l21).max(0.0));
            let (z1, z2): (f64, f64) = (unit.sample(&mut rng), unit.sample(&mut rng));
            pts.push([g.center[0] + l11 * z1, g.center[1] + l21 * z1 + l22 * z2]);
        }
    }
    Ok(pts)
}

/// Centroid per occupied cell of a grid of size `voxel` anchored at the points' lower corner.
fn decimate_once(points: &[[f64; 2]], origin: [f64; 2], voxel: f64) -> Vec<[f64; 2]> {
    let mut cells: BTreeMap<(i64, i64), ([f64; 2], usize)> = BTreeMap::new();
    for p in points {
        let key = (floor((p[0] - origin[0]) / voxel) as i64, floor((p[1] - origin[1]) / voxel) as i64);
        let e = cells.entry(key).or_insert(([0.0; 2], 0));
        e.0[0] += p[0];
        e.0[1] += p[1];
        e.1 += 1;
    }
    cells.values().map(|(s, n)| [s[0] / *n as f64, s[1] / *n as f64]).collect()
}

/// Decimates until fewer than `max_points` remain, growing the voxel 1.5× per round.
/// Every round decimates the original input; returns the points and the final voxel size.
pub fn voxel_decimate(points: &[[f64; 2]], voxel: f64, max_points: usize) -> Result<(Vec<[f64; 2]>, f64)> {
    if !(voxel > 0.0) {
        return Err(Error::invalid("voxel must be positive"));
    }
    if max_points < 2 {
        return Err(Error::invalid("max_points must be at least 2"));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::invalid("non-finite point"));
    }
    if points.is_empty() {
        return Ok((Vec::new(), voxel));
    }
    let origin = points.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
    let mut v = voxel;
    loop {
        let out = decimate_once(points, origin, v);
        if out.len() < max_points {
            return Ok((out, v));
        }
        v *= 1.5;
    }
}

/// Grid cell of `p` for a decimation grid anchored at `origin`.
pub fn decimation_cell(p: [f64; 2], origin: [f64; 2], voxel: f64) -> (i64, i64) {
    (floor((p[0] - origin[0]) / voxel) as i64, floor((p[1] - origin[1]) / voxel) as i64)
}
