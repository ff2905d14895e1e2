//! Photometric training loss `L1 + λ·(1 - SSIM)` and its image gradient.

use crate::image::Image;
use crate::metrics::ssim_plane;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_ssim: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_ssim: 0.2 }
    }
}

/// Loss value and `dL/dImage`.
pub fn photometric_loss(render: &Image, gt: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    if !render.same_shape(gt) {
        return Err(Error::invalid("rendered and target images differ in shape"));
    }
    let n = render.data.len() as f64;
    let mut grad = Image::new(render.width, render.height);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&render.data).zip(&gt.data) {
        let d = r - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    let mut value = l1 / n;
    if cfg.lambda_ssim != 0.0 {
        let (s, ds) = ssim_plane(&render.luminance(), &gt.luminance(), render.width, render.height, true)?;
        value += cfg.lambda_ssim * (1.0 - s);
        let ds = ds.unwrap();
        for (px, d) in grad.data.chunks_exact_mut(3).zip(&ds) {
            let v = -cfg.lambda_ssim * d / 3.0;
            px[0] += v;
            px[1] += v;
            px[2] += v;
        }
    }
    Ok((value, grad))
}
