//! Differentiable 2D Gaussian rasterizer with ordered front-to-back compositing.
//!
//! Gaussians are sorted by `depth_key`, projected through an affine view and
//! binned into 8×8 pixel tiles. A Gaussian touches a pixel only where its
//! alpha `o·exp(-½dᵀΣ⁻¹d)` reaches `alpha_min`; the bounding box is the
//! matching opacity-aware ellipse extent. The backward pass replays each
//! pixel's contribution list and runs a suffix accumulation, so it never
//! divides by `1 - α`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::math::{ceil, exp, floor, ln, sqrt};
use crate::scene::GaussianAttributes;
use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const TILE: usize = 8;

/// Affine map from scene coordinates to pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    /// Row-major `[a, b, c, d]` for `[[a, b], [c, d]]`.
    pub linear: [f64; 4],
    pub translation: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl ViewTransform {
    pub fn new(linear: [f64; 4], translation: [f64; 2], width: usize, height: usize) -> Result<Self> {
        let det = linear[0] * linear[3] - linear[1] * linear[2];
        if !(det.abs() > 1e-8) {
            return Err(Error::invalid(format!("view linear part is singular (det {det})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("empty image resolution"));
        }
        Ok(ViewTransform { linear, translation, width, height })
    }

    /// Maps the unit square onto the full image.
    pub fn unit_square(width: usize, height: usize) -> Self {
        ViewTransform { linear: [width as f64, 0.0, 0.0, height as f64], translation: [0.0, 0.0], width, height }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [a, b, c, d] = self.linear;
        [a * p[0] + b * p[1] + self.translation[0], c * p[0] + d * p[1] + self.translation[1]]
    }

    /// Normalized translation used to condition the decoder.
    pub fn view_code(&self) -> [f64; 2] {
        [self.translation[0] / self.width as f64, self.translation[1] / self.height as f64]
    }

    /// `A Σ Aᵀ` for a covariance given as `(xx, xy, yy)`.
    pub fn project_cov(&self, cov: [f64; 3]) -> [f64; 3] {
        let [a, b, c, d] = self.linear;
        let [sxx, sxy, syy] = cov;
        // M = A Σ
        let m11 = a * sxx + b * sxy;
        let m12 = a * sxy + b * syy;
        let m21 = c * sxx + d * sxy;
        let m22 = c * sxy + d * syy;
        [m11 * a + m12 * b, m11 * c + m12 * d, m21 * c + m22 * d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Contributions with alpha below this value are skipped.
    pub alpha_min: f64,
    /// A pixel stops accumulating once its transmittance falls below this value.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { alpha_min: 1e-7, min_transmittance: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projected {
    mean: [f64; 2],
    cov: [f64; 3],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    /// `ln(alpha_min / opacity)`: exponents below this are skipped.
    power_min: f64,
    /// Inclusive pixel box; empty when `x0 > x1` or `y0 > y1`.
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

impl Projected {
    fn visible(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderTape {
    view: ViewTransform,
    cfg: RenderConfig,
    /// Projected Gaussians in depth order.
    proj: Vec<Projected>,
    /// `order[s]` is the input index of the `s`-th Gaussian in depth order.
    order: Vec<usize>,
    tiles_x: usize,
    tiles_y: usize,
    tile_start: Vec<usize>,
    tile_items: Vec<u32>,
}

impl RenderTape {
    pub fn gaussian_count(&self) -> usize {
        self.order.len()
    }

    pub fn view(&self) -> &ViewTransform {
        &self.view
    }

    /// Per input Gaussian: does its pixel box intersect the image.
    pub fn visible(&self) -> Vec<bool> {
        let mut v = vec![false; self.order.len()];
        for (s, &i) in self.order.iter().enumerate() {
            v[i] = self.proj[s].visible();
        }
        v
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's attributes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub center: [f64; 2],
    pub cov: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    /// Gradient with respect to the projected (pixel-space) center.
    pub center_px: [f64; 2],
}

fn project(g: &GaussianAttributes, view: &ViewTransform, cfg: &RenderConfig) -> Result<Projected> {
    let [sxx, sxy, syy] = g.cov;
    if !(sxx > 0.0 && syy > 0.0 && sxx * syy - sxy * sxy > 0.0) {
        return Err(Error::invalid(format!("covariance {:?} is not positive definite", g.cov)));
    }
    let cov = view.project_cov(g.cov);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return Err(Error::invalid("projected covariance is not positive definite"));
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mean = view.apply(g.center);
    let empty = Projected {
        mean,
        cov,
        conic,
        opacity: g.opacity,
        color: g.color,
        power_min: 0.0,
        x0: 0,
        x1: -1,
        y0: 0,
        y1: -1,
    };
    if !(g.opacity >= cfg.alpha_min) || g.opacity <= 0.0 {
        return Ok(empty);
    }
    let power_min = ln(cfg.alpha_min / g.opacity);
    let k = sqrt(-2.0 * power_min);
    let rx = k * sqrt(cov[0]);
    let ry = k * sqrt(cov[2]);
    let clamp_box = |lo: f64, hi: f64, n: usize| -> (i64, i64) {
        let a = ceil(lo).max(0.0);
        let b = floor(hi).min(n as f64 - 1.0);
        if a > b || !a.is_finite() || !b.is_finite() {
            (0, -1)
        } else {
            (a as i64, b as i64)
        }
    };
    let (x0, x1) = clamp_box(mean[0] - rx, mean[0] + rx, view.width);
    let (y0, y1) = clamp_box(mean[1] - ry, mean[1] + ry, view.height);
    if x0 > x1 || y0 > y1 {
        return Ok(empty);
    }
    Ok(Projected { power_min, x0, x1, y0, y1, ..empty })
}

/// Sorts, projects and bins. Tile lists hold depth-order indices.
fn prepare(gaussians: &[GaussianAttributes], view: &ViewTransform, cfg: &RenderConfig) -> Result<RenderTape> {
    let mut order: Vec<usize> = (0..gaussians.len()).collect();
    order.sort_by(|&a, &b| gaussians[a].depth_key.total_cmp(&gaussians[b].depth_key));
    let proj = order.iter().map(|&i| project(&gaussians[i], view, cfg)).collect::<Result<Vec<_>>>()?;
    let tiles_x = view.width.div_ceil(TILE);
    let tiles_y = view.height.div_ceil(TILE);
    let mut counts = vec![0usize; tiles_x * tiles_y + 1];
    let tile_range = |p: &Projected| {
        (p.x0 as usize / TILE, p.x1 as usize / TILE, p.y0 as usize / TILE, p.y1 as usize / TILE)
    };
    for p in proj.iter().filter(|p| p.visible()) {
        let (tx0, tx1, ty0, ty1) = tile_range(p);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let tile_start = counts.clone();
    let mut fill = counts;
    let mut tile_items = vec![0u32; *tile_start.last().unwrap()];
    for (s, p) in proj.iter().enumerate() {
        if !p.visible() {
            continue;
        }
        let (tx0, tx1, ty0, ty1) = tile_range(p);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let t = ty * tiles_x + tx;
                tile_items[fill[t]] = s as u32;
                fill[t] += 1;
            }
        }
    }
    Ok(RenderTape { view: *view, cfg: *cfg, proj, order, tiles_x, tiles_y, tile_start, tile_items })
}

impl RenderTape {
    fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        let t = ty * self.tiles_x + tx;
        &self.tile_items[self.tile_start[t]..self.tile_start[t + 1]]
    }

    /// Calls `f(slot_in_tile, depth_index, alpha, G, T)` for each contribution, front to back.
    #[inline]
    fn walk_pixel(&self, list: &[u32], x: usize, y: usize, mut f: impl FnMut(usize, usize, f64, f64, f64)) -> f64 {
        let (xi, yi) = (x as i64, y as i64);
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for (slot, &s) in list.iter().enumerate() {
            let p = &self.proj[s as usize];
            if xi < p.x0 || xi > p.x1 || yi < p.y0 || yi > p.y1 {
                continue;
            }
            let dx = px - p.mean[0];
            let dy = py - p.mean[1];
            let power = -0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
            if power < p.power_min {
                continue;
            }
            let g = exp(power);
            let alpha = p.opacity * g;
            f(slot, s as usize, alpha, g, t);
            t *= 1.0 - alpha;
            if t < self.cfg.min_transmittance {
                break;
            }
        }
        t
    }

    fn forward_band(&self, ty: usize, band: &mut [f64]) {
        let w = self.view.width;
        let y_lo = ty * TILE;
        let rows = band.len() / (3 * w);
        for tx in 0..self.tiles_x {
            let list = self.tile(tx, ty);
            if list.is_empty() {
                continue;
            }
            for r in 0..rows {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let mut c = [0.0; 3];
                    self.walk_pixel(list, x, y_lo + r, |_, s, alpha, _, t| {
                        let col = self.proj[s].color;
                        let wgt = alpha * t;
                        c[0] += col[0] * wgt;
                        c[1] += col[1] * wgt;
                        c[2] += col[2] * wgt;
                    });
                    let i = 3 * (r * w + x);
                    band[i..i + 3].copy_from_slice(&c);
                }
            }
        }
    }

    /// Image-space gradients per tile slot: `[mean(2), conic(3), opacity, color(3)]`.
    fn backward_band(&self, ty: usize, dimage: &Image) -> Vec<Vec<[f64; 9]>> {
        let w = self.view.width;
        let h = self.view.height;
        let mut out = Vec::with_capacity(self.tiles_x);
        let mut contribs: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
        for tx in 0..self.tiles_x {
            let list = self.tile(tx, ty);
            let mut acc = vec![[0.0f64; 9]; list.len()];
            if list.is_empty() {
                out.push(acc);
                continue;
            }
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let up = dimage.get(x, y);
                    if up == [0.0; 3] {
                        continue;
                    }
                    contribs.clear();
                    self.walk_pixel(list, x, y, |slot, s, alpha, g, t| contribs.push((slot, s, alpha, g, t)));
                    // suffix colour behind each contribution, projected on the upstream gradient
                    let mut behind = 0.0;
                    for &(slot, s, alpha, g, t) in contribs.iter().rev() {
                        let p = &self.proj[s];
                        let gc = up[0] * p.color[0] + up[1] * p.color[1] + up[2] * p.color[2];
                        let d_alpha = t * (gc - behind);
                        behind = gc * alpha + (1.0 - alpha) * behind;
                        let a = &mut acc[slot];
                        let wgt = alpha * t;
                        a[6] += up[0] * wgt;
                        a[7] += up[1] * wgt;
                        a[8] += up[2] * wgt;
                        a[5] += d_alpha * g;
                        let d_power = d_alpha * p.opacity * g;
                        let dx = x as f64 - p.mean[0];
                        let dy = y as f64 - p.mean[1];
                        a[0] += d_power * (p.conic[0] * dx + p.conic[1] * dy);
                        a[1] += d_power * (p.conic[1] * dx + p.conic[2] * dy);
                        a[2] += d_power * (-0.5 * dx * dx);
                        a[3] += d_power * (-dx * dy);
                        a[4] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            out.push(acc);
        }
        out
    }
}

/// Renders `gaussians` through `view` and keeps the tape for [`render_backward`].
pub fn render_with_tape(
    gaussians: &[GaussianAttributes],
    view: &ViewTransform,
    cfg: &RenderConfig,
) -> Result<(Image, RenderTape)> {
    let tape = prepare(gaussians, view, cfg)?;
    let mut img = Image::new(view.width, view.height);
    let band_len = 3 * view.width * TILE;
    #[cfg(feature = "parallel")]
    img.data.par_chunks_mut(band_len).enumerate().for_each(|(ty, band)| tape.forward_band(ty, band));
    #[cfg(not(feature = "parallel"))]
    img.data.chunks_mut(band_len).enumerate().for_each(|(ty, band)| tape.forward_band(ty, band));
    Ok((img, tape))
}

pub fn render(gaussians: &[GaussianAttributes], view: &ViewTransform, cfg: &RenderConfig) -> Result<Image> {
    render_with_tape(gaussians, view, cfg).map(|(img, _)| img)
}

/// Gradients of a scalar loss with respect to each input Gaussian, given `dL/dImage`.
pub fn render_backward(tape: &RenderTape, dimage: &Image) -> Result<Vec<GaussianGrad>> {
    if dimage.width != tape.view.width || dimage.height != tape.view.height {
        return Err(Error::invalid("image gradient does not match the rendered resolution"));
    }
    #[cfg(feature = "parallel")]
    let bands: Vec<_> = (0..tape.tiles_y).into_par_iter().map(|ty| tape.backward_band(ty, dimage)).collect();
    #[cfg(not(feature = "parallel"))]
    let bands: Vec<_> = (0..tape.tiles_y).map(|ty| tape.backward_band(ty, dimage)).collect();

    // fixed-order reduction: tile rows, then tiles, then slots
    let mut img_grad = vec![[0.0f64; 9]; tape.proj.len()];
    for (ty, band) in bands.iter().enumerate() {
        for (tx, acc) in band.iter().enumerate() {
            for (slot, &s) in tape.tile(tx, ty).iter().enumerate() {
                let dst = &mut img_grad[s as usize];
                for (d, v) in dst.iter_mut().zip(acc[slot].iter()) {
                    *d += v;
                }
            }
        }
    }

    let [a, b, c, d] = tape.view.linear;
    let mut grads = vec![GaussianGrad::default(); tape.order.len()];
    for (s, gi) in img_grad.iter().enumerate() {
        let p = &tape.proj[s];
        let out = &mut grads[tape.order[s]];
        out.center_px = [gi[0], gi[1]];
        out.center = [a * gi[0] + c * gi[1], b * gi[0] + d * gi[1]];
        out.opacity = gi[5];
        out.color = [gi[6], gi[7], gi[8]];
        // conic = inverse of projected covariance (p, q, r)
        let [cp, cq, cr] = p.cov;
        let det = cp * cr - cq * cq;
        let det2 = det * det;
        let (ga, gb, gc) = (gi[2], gi[3], gi[4]);
        let g_p = ga * (-cr * cr) + gb * (cq * cr) + gc * (-cq * cq);
        let g_q = ga * (2.0 * cr * cq) + gb * (-(det + 2.0 * cq * cq)) + gc * (2.0 * cp * cq);
        let g_r = ga * (-cq * cq) + gb * (cq * cp) + gc * (-cp * cp);
        let (g_p, g_q, g_r) = (g_p / det2, g_q / det2, g_r / det2);
        // projected covariance = A Σ Aᵀ; pull back the symmetric gradient
        let h12 = 0.5 * g_q;
        // Aᵀ G A with G = [[g_p, h12], [h12, g_r]]
        let m11 = g_p * a + h12 * c;
        let m12 = g_p * b + h12 * d;
        let m21 = h12 * a + g_r * c;
        let m22 = h12 * b + g_r * d;
        let s11 = a * m11 + c * m21;
        let s12 = a * m12 + c * m22;
        let s22 = b * m12 + d * m22;
        out.cov = [s11, 2.0 * s12, s22];
    }
    Ok(grads)
}

/// Reference compositor that evaluates every Gaussian at every pixel without culling.
pub fn render_brute_force(gaussians: &[GaussianAttributes], view: &ViewTransform) -> Image {
    let mut order: Vec<usize> = (0..gaussians.len()).collect();
    order.sort_by(|&a, &b| gaussians[a].depth_key.total_cmp(&gaussians[b].depth_key));
    Image::from_fn(view.width, view.height, |x, y| {
        let mut c = [0.0; 3];
        let mut t = 1.0;
        for &i in &order {
            let g = &gaussians[i];
            let m = view.apply(g.center);
            let cov = view.project_cov(g.cov);
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            let (dx, dy) = (x as f64 - m[0], y as f64 - m[1]);
            let q = (cov[2] * dx * dx - 2.0 * cov[1] * dx * dy + cov[0] * dy * dy) / det;
            let alpha = g.opacity * exp(-0.5 * q);
            for ch in 0..3 {
                c[ch] += g.color[ch] * alpha * t;
            }
            t *= 1.0 - alpha;
        }
        c
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view() -> ViewTransform {
        ViewTransform::unit_square(32, 32)
    }

    #[test]
    fn empty_scene_is_black() {
        let img = render(&[], &view(), &RenderConfig::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_peak_has_its_color() {
        let v = view();
        let g = GaussianAttributes::isotropic([0.5, 0.5], 0.05, [0.2, 0.6, 0.9], 1.0 - 1e-9, 0.0);
        let img = render(&[g], &v, &RenderConfig::default()).unwrap();
        let peak = img.get(16, 16);
        for ch in 0..3 {
            assert!((peak[ch] - g.color[ch]).abs() < 1e-6);
        }
        assert!(img.get(18, 16)[0] < peak[0]);
        assert!(img.get(20, 16)[0] < img.get(18, 16)[0]);
    }

    #[test]
    fn rejects_non_psd_covariance() {
        let mut g = GaussianAttributes::isotropic([0.5, 0.5], 0.05, [1.0; 3], 0.5, 0.0);
        g.cov = [1.0, 2.0, 1.0];
        assert!(matches!(render(&[g], &view(), &RenderConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn singular_view_is_rejected() {
        assert!(ViewTransform::new([1.0, 2.0, 2.0, 4.0], [0.0, 0.0], 8, 8).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = GaussianAttributes::isotropic([0.5, 0.5], 0.1, [0.3; 3], 0.7, 0.0);
        let (_, tape) = render_with_tape(&[g], &view(), &RenderConfig::default()).unwrap();
        let grads = render_backward(&tape, &Image::new(32, 32)).unwrap();
        assert_eq!(grads[0], GaussianGrad::default());
    }

    #[test]
    fn center_pixel_increases_with_opacity() {
        let g = GaussianAttributes::isotropic([0.5, 0.5], 0.1, [0.3, 0.5, 0.7], 0.4, 0.0);
        let (_, tape) = render_with_tape(&[g], &view(), &RenderConfig::default()).unwrap();
        let mut up = Image::new(32, 32);
        up.set(16, 16, [1.0, 1.0, 1.0]);
        let grads = render_backward(&tape, &up).unwrap();
        assert!(grads[0].opacity > 0.0);
        assert!(grads[0].color.iter().all(|&c| c > 0.0));
    }
}
