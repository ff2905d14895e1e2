//! Learnable temporal opacity of a key-frame anchor: `w = exp(-λ·d·|τ - o|)`.

use crate::math::exp;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    pub lambda_decay: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig { lambda_decay: 2.0 }
    }
}

/// Which of an anchor's two parameter sets drives its weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Used for `τ ≥ 0`, i.e. frames after the anchor's key frame.
    Forward,
    /// Used for `τ ≤ 0`.
    Backward,
}

pub fn blend_weight(o: f64, d: f64, tau: f64, lambda_decay: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::invalid("blend decay must be positive"));
    }
    if !(lambda_decay > 0.0) {
        return Err(Error::invalid("lambda_decay must be positive"));
    }
    Ok(exp(-lambda_decay * d * (tau - o).abs()))
}

/// `(w, ∂w/∂o, ∂w/∂d)`. At `τ = o` the offset derivative is taken as zero.
#[inline]
pub fn blend_weight_grad(o: f64, d: f64, tau: f64, lambda_decay: f64) -> (f64, f64, f64) {
    let r = tau - o;
    let w = exp(-lambda_decay * d * r.abs());
    let sign = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    (w, w * lambda_decay * d * sign, -w * lambda_decay * r.abs())
}


/// Layers that render frame `t` of chunk `n`: the chunk's own key anchors deformed
/// forward, plus the next key's anchors deformed backward when a partner exists.
pub fn chunk_layers<'a>(
    plan: &crate::schedule::TrainPlan,
    n: usize,
    t: usize,
    own: &'a crate::model::Bundle,
    next: Option<&'a crate::model::Bundle>,
) -> Result<alloc::vec::Vec<crate::model::Layer<'a>>> {
    use crate::model::{BlendMode, Layer};
    let chunk = plan.window_of(crate::schedule::WindowKind::Chunk, n)?;
    if !chunk.contains(t) {
        return Err(Error::OutOfWindow { t, lo: chunk.lo, hi: chunk.hi });
    }
    let mut layers = alloc::vec![Layer {
        bundle: own,
        tau: Some(plan.tau(t, n)?),
        blend: BlendMode::Learned(Direction::Forward),
    }];
    if let Some(b) = next {
        layers.push(Layer { bundle: b, tau: Some(plan.tau(t, n + 1)?), blend: BlendMode::Learned(Direction::Backward) });
    }
    Ok(layers)
}

/// Blended render of frame `t` in chunk `n` from key bundles `n` and (if any) `n + 1`.
pub fn blend_frame(
    plan: &crate::schedule::TrainPlan,
    n: usize,
    t: usize,
    own: &crate::model::Bundle,
    next: Option<&crate::model::Bundle>,
    view: &crate::render::ViewTransform,
    cfg: &crate::model::FrameConfig,
) -> Result<crate::image::Image> {
    let layers = chunk_layers(plan, n, t, own, next)?;
    crate::model::render_frame(&layers, view, cfg)
}

/// Chunk-isolated render without blending: key bundle `n` alone, deformed to `t`, full opacity.
pub fn hard_switch_frame(
    plan: &crate::schedule::TrainPlan,
    n: usize,
    t: usize,
    own: &crate::model::Bundle,
    view: &crate::render::ViewTransform,
    cfg: &crate::model::FrameConfig,
) -> Result<crate::image::Image> {
    let layer = crate::model::Layer { bundle: own, tau: Some(plan.tau(t, n)?), blend: crate::model::BlendMode::None };
    crate::model::render_frame(&[layer], view, cfg)
}
