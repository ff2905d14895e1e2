//! Image quality and temporal-consistency metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::math::{exp, floor, log10, sqrt};
use crate::{Error, Result};

/// Peak signal-to-noise ratio on the [0, 1] scale; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "psnr of images with different shapes");
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * log10(1.0 / mse)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[x + j];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + x + j] += kv * v;
            }
        }
    }
    out
}

/// Mean SSIM of two single-channel planes, with `∂ssim/∂x` when `want_grad`.
pub fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid("image smaller than the SSIM window"));
    }
    if x.len() != w * h || y.len() != w * h {
        return Err(Error::invalid("plane sizes do not match"));
    }
    let k = ssim_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let exx = filter_valid(&xx, w, h, &k);
    let eyy = filter_valid(&yy, w, h, &k);
    let exy = filter_valid(&xy, w, h, &k);
    let n = mx.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let bb = b1 * b2;
            g_mu[i] = inv_n * (2.0 * uy * (a2 - a1) / bb - 2.0 * ux * s * (b2 - b1) / bb);
            g_xx[i] = inv_n * (-s / b2);
            g_xy[i] = inv_n * (2.0 * a1 / bb);
        }
    }
    let mean = total * inv_n;
    if !want_grad {
        return Ok((mean, None));
    }
    let a_mu = filter_valid_adjoint(&g_mu, w, h, &k);
    let a_xx = filter_valid_adjoint(&g_xx, w, h, &k);
    let a_xy = filter_valid_adjoint(&g_xy, w, h, &k);
    let grad = (0..w * h).map(|q| a_mu[q] + 2.0 * x[q] * a_xx[q] + y[q] * a_xy[q]).collect();
    Ok((mean, Some(grad)))
}

/// Single-scale SSIM on luminance (channel mean), 11×11 Gaussian window, valid region only.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("ssim of images with different shapes"));
    }
    ssim_plane(&a.luminance(), &b.luminance(), a.width, a.height, false).map(|r| r.0)
}

/// Dense optical flow, `(u, v)` per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<[f64; 2]>,
}

impl Flow {
    pub fn zeros(width: usize, height: usize) -> Self {
        Flow { width, height, uv: vec![[0.0; 2]; width * height] }
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.uv.iter().map(|f| sqrt(f[0] * f[0] + f[1] * f[1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkConfig {
    pub levels: usize,
    /// Window side length (odd).
    pub window: usize,
    pub iterations: usize,
    pub min_det: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        LkConfig { levels: 3, window: 7, iterations: 5, min_det: 1e-8 }
    }
}

impl LkConfig {
    pub fn radius(&self) -> usize {
        self.window / 2
    }

    /// Largest flow magnitude per component the estimator can report.
    pub fn max_displacement(&self) -> f64 {
        self.radius() as f64 * ((1usize << self.levels) - 1) as f64
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f64 {
        let xi = x.clamp(0, self.w as isize - 1) as usize;
        let yi = y.clamp(0, self.h as isize - 1) as usize;
        self.v[yi * self.w + xi]
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = floor(x);
        let y0 = floor(y);
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at(xi, yi);
        let b = self.at(xi + 1, yi);
        let c = self.at(xi, yi + 1);
        let d = self.at(xi + 1, yi + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// [1 2 1]/4 blur then 2× decimation.
    fn down(&self) -> Plane {
        let w = self.w.div_ceil(2);
        let h = self.h.div_ceil(2);
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (2 * x as isize, 2 * y as isize);
                let mut acc = 0.0;
                for (dy, wy) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                        acc += wx * wy * self.at(cx + dx, cy + dy);
                    }
                }
                v[y * w + x] = acc / 16.0;
            }
        }
        Plane { w, h, v }
    }
}

fn pyramid(img: &Image, levels: usize) -> Vec<Plane> {
    let mut p = vec![Plane { w: img.width, h: img.height, v: img.luminance() }];
    for _ in 1..levels {
        let next = p.last().unwrap().down();
        p.push(next);
    }
    p
}

/// Pyramidal Lucas-Kanade flow from `prev` to `next` on luminance.
///
/// Each level refines the upsampled coarser estimate by at most the window
/// radius per axis, so the result never exceeds [`LkConfig::max_displacement`].
/// Pixels whose finest-level structure tensor has determinant below `min_det`
/// get zero flow.
pub fn flow_lk_with(prev: &Image, next: &Image, cfg: &LkConfig) -> Result<Flow> {
    if !prev.same_shape(next) {
        return Err(Error::invalid("flow of images with different shapes"));
    }
    let levels = cfg.levels.max(1);
    let pa = pyramid(prev, levels);
    let pb = pyramid(next, levels);
    let r = cfg.radius() as isize;
    let rad = cfg.radius() as f64;
    let mut flow: Vec<[f64; 2]> = Vec::new();
    let mut fw = 0;
    for l in (0..levels).rev() {
        let (a, b) = (&pa[l], &pb[l]);
        let mut cur = vec![[0.0; 2]; a.w * a.h];
        if !flow.is_empty() {
            for y in 0..a.h {
                for x in 0..a.w {
                    let (sx, sy) = ((x / 2).min(fw - 1), (y / 2).min(flow.len() / fw - 1));
                    let f = flow[sy * fw + sx];
                    cur[y * a.w + x] = [2.0 * f[0], 2.0 * f[1]];
                }
            }
        }
        let ix: Vec<f64> = (0..a.w * a.h)
            .map(|i| {
                let (x, y) = ((i % a.w) as isize, (i / a.w) as isize);
                0.5 * (a.at(x + 1, y) - a.at(x - 1, y))
            })
            .collect();
        let iy: Vec<f64> = (0..a.w * a.h)
            .map(|i| {
                let (x, y) = ((i % a.w) as isize, (i / a.w) as isize);
                0.5 * (a.at(x, y + 1) - a.at(x, y - 1))
            })
            .collect();
        let grad_at = |g: &[f64], x: isize, y: isize| {
            let xi = x.clamp(0, a.w as isize - 1) as usize;
            let yi = y.clamp(0, a.h as isize - 1) as usize;
            g[yi * a.w + xi]
        };
        for y in 0..a.h as isize {
            for x in 0..a.w as isize {
                let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let gx = grad_at(&ix, x + dx, y + dy);
                        let gy = grad_at(&iy, x + dx, y + dy);
                        gxx += gx * gx;
                        gxy += gx * gy;
                        gyy += gy * gy;
                    }
                }
                let det = gxx * gyy - gxy * gxy;
                let idx = y as usize * a.w + x as usize;
                if det < cfg.min_det {
                    if l == 0 {
                        cur[idx] = [0.0, 0.0];
                    }
                    continue;
                }
                let init = cur[idx];
                let mut d = init;
                for _ in 0..cfg.iterations {
                    let (mut bx, mut by) = (0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let gx = grad_at(&ix, x + dx, y + dy);
                            let gy = grad_at(&iy, x + dx, y + dy);
                            let it = a.at(x + dx, y + dy)
                                - b.bilinear((x + dx) as f64 + d[0], (y + dy) as f64 + d[1]);
                            bx += gx * it;
                            by += gy * it;
                        }
                    }
                    let ux = (gyy * bx - gxy * by) / det;
                    let uy = (gxx * by - gxy * bx) / det;
                    d[0] = (d[0] + ux).clamp(init[0] - rad, init[0] + rad);
                    d[1] = (d[1] + uy).clamp(init[1] - rad, init[1] + rad);
                    if ux * ux + uy * uy < 1e-6 {
                        break;
                    }
                }
                cur[idx] = d;
            }
        }
        flow = cur;
        fw = a.w;
    }
    Ok(Flow { width: prev.width, height: prev.height, uv: flow })
}

pub fn flow_lk(prev: &Image, next: &Image) -> Result<Flow> {
    flow_lk_with(prev, next, &LkConfig::default())
}

/// Flows between consecutive frames.
pub fn sequence_flows(seq: &[Image]) -> Result<Vec<Flow>> {
    seq.windows(2).map(|w| flow_lk(&w[0], &w[1])).collect()
}

/// Mean per-pixel ℓ1 difference of two flow sequences.
pub fn tof_from_flows(rendered: &[Flow], gt: &[Flow]) -> Result<f64> {
    if rendered.len() != gt.len() || rendered.is_empty() {
        return Err(Error::invalid("flow sequences must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    for (fr, fg) in rendered.iter().zip(gt) {
        if fr.uv.len() != fg.uv.len() {
            return Err(Error::invalid("flow fields differ in size"));
        }
        let s: f64 = fr.uv.iter().zip(&fg.uv).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum();
        total += s / fr.uv.len() as f64;
    }
    Ok(total / rendered.len() as f64)
}

/// Temporal flow error between a rendered sequence and ground truth.
pub fn tof(rendered: &[Image], gt: &[Image]) -> Result<f64> {
    if rendered.len() != gt.len() || rendered.len() < 2 {
        return Err(Error::invalid("tOF needs two equal-length sequences of at least two frames"));
    }
    tof_from_flows(&sequence_flows(rendered)?, &sequence_flows(gt)?)
}

/// Mean flow magnitude (px/frame) of moving pixels, averaged over one-second windows.
pub fn ofps_from_flows(flows: &[Flow], fps: usize, mag_threshold: f64) -> Result<f64> {
    if fps == 0 {
        return Err(Error::invalid("fps must be positive"));
    }
    if flows.is_empty() {
        return Ok(0.0);
    }
    let mut windows = 0usize;
    let mut acc = 0.0;
    for chunk in flows.chunks(fps) {
        let (mut sum, mut count) = (0.0, 0usize);
        for f in chunk {
            for m in f.magnitudes().filter(|&m| m > mag_threshold) {
                sum += m;
                count += 1;
            }
        }
        // a window without moving pixels contributes zero
        acc += if count == 0 { 0.0 } else { sum / count as f64 };
        windows += 1;
    }
    Ok(acc / windows as f64)
}

pub fn ofps(seq: &[Image], fps: usize, mag_threshold: f64) -> Result<f64> {
    ofps_from_flows(&sequence_flows(seq)?, fps, mag_threshold)
}

/// Row `row` of every frame, stacked top to bottom.
pub fn temporal_profile(seq: &[Image], row: usize) -> Result<Image> {
    let first = seq.first().ok_or_else(|| Error::invalid("empty sequence"))?;
    if row >= first.height {
        return Err(Error::invalid("row outside the frame"));
    }
    let w = first.width;
    let mut out = Image::new(w, seq.len());
    for (t, f) in seq.iter().enumerate() {
        if f.width != w {
            return Err(Error::invalid("frames differ in width"));
        }
        let src = &f.data[3 * row * w..3 * (row + 1) * w];
        out.data[3 * t * w..3 * (t + 1) * w].copy_from_slice(src);
    }
    Ok(out)
}

/// Mean absolute difference between consecutive profile rows `t` and `t + 1`.
pub fn profile_row_jump(profile: &Image, t: usize) -> f64 {
    let w = profile.width;
    let a = &profile.data[3 * t * w..3 * (t + 1) * w];
    let b = &profile.data[3 * (t + 1) * w..3 * (t + 2) * w];
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
    }

    #[test]
    fn psnr_black_vs_gray() {
        let a = Image::new(4, 4);
        let b = Image::filled(4, 4, [0.5; 3]);
        assert!((psnr(&a, &b) - 10.0 * (4.0f64).log10()).abs() < 1e-12);
        assert!((psnr(&a, &b) - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_image(24, 20, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constants_matches_closed_form() {
        let a = Image::filled(16, 16, [0.4; 3]);
        let b = Image::filled(16, 16, [0.5; 3]);
        let expect = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.16 + 0.25 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let (w, h) = (14, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let (_, g) = ssim_plane(&x, &y, w, h, true).unwrap();
        let g = g.unwrap();
        let eps = 1e-6;
        for q in [0, 17, 50, 100, w * h - 1] {
            let mut xp = x.clone();
            xp[q] += eps;
            let mut xm = x.clone();
            xm[q] -= eps;
            let fd = (ssim_plane(&xp, &y, w, h, false).unwrap().0 - ssim_plane(&xm, &y, w, h, false).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g[q]).abs() < 1e-8, "{q}: {fd} vs {}", g[q]);
        }
    }

    #[test]
    fn identical_frames_have_zero_flow() {
        let a = random_image(32, 32, 4);
        let f = flow_lk(&a, &a).unwrap();
        assert!(f.uv.iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
    }

    #[test]
    fn temporal_profile_stacks_rows() {
        let seq: Vec<Image> = (0..5).map(|t| Image::filled(6, 4, [t as f64 / 10.0; 3])).collect();
        let p = temporal_profile(&seq, 2).unwrap();
        assert_eq!((p.width, p.height), (6, 5));
        assert_eq!(p.get(3, 4), [0.4; 3]);
    }
}
