//! Frame-level forward and backward passes over one or more anchor bundles.
//!
//! A frame is rendered from a list of layers. Each layer is a bundle (anchor
//! space plus optional deformation field) evaluated at a relative time, with an
//! optional temporal-opacity weight. All layers' Gaussians are composited in a
//! single depth-sorted pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::blend::{blend_weight_grad, BlendConfig, Direction};
use crate::deform::{DeformationField, FieldGrad, QueryTape};
use crate::image::Image;
use crate::math::{exp, sigmoid};
use crate::mlp::MlpGrad;
use crate::render::{render_backward, render_with_tape, RenderConfig, RenderTape, ViewTransform};
use crate::scene::{
    rotated_covariance, AnchorSpace, GaussianAttributes, ATTRS_PER_GAUSSIAN, A_COLOR, A_DEPTH, A_OPACITY, A_ROT,
    A_SCALE, SCALE_FLOOR,
};
use crate::{Error, Result};

/// The unit of storage: an anchor space with the deformation field trained for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub space: AnchorSpace,
    pub field: Option<DeformationField>,
}

impl Bundle {
    pub fn new(space: AnchorSpace) -> Self {
        Bundle { space, field: None }
    }
}

/// How a layer's anchors are weighted in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlendMode {
    /// Full decoded opacity.
    None,
    /// Weight from the anchor's learned parameters of the given direction.
    Learned(Direction),
    /// The same fixed weight for every anchor.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct Layer<'a> {
    pub bundle: &'a Bundle,
    /// Relative time for the deformation field; `None` renders the canonical space.
    pub tau: Option<f64>,
    pub blend: BlendMode,
}

impl<'a> Layer<'a> {
    pub fn canonical(bundle: &'a Bundle) -> Self {
        Layer { bundle, tau: None, blend: BlendMode::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameConfig {
    pub render: RenderConfig,
    pub blend: BlendConfig,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMask {
    pub anchors: bool,
    pub decoder: bool,
    pub field: bool,
    pub blend: bool,
}

impl TrainMask {
    pub const ALL: TrainMask = TrainMask { anchors: true, decoder: true, field: true, blend: true };
    pub const BLEND_ONLY: TrainMask = TrainMask { anchors: false, decoder: false, field: false, blend: true };
    pub const NO_BLEND: TrainMask = TrainMask { anchors: true, decoder: true, field: true, blend: false };
}

#[derive(Debug, Clone)]
struct AnchorCache {
    hidden: Vec<f64>,
    out: Vec<f64>,
    query: Option<QueryTape>,
    scaling: [f64; 2],
    opacity_logit: Vec<f64>,
    /// `(w, ∂w/∂o, ∂w/∂decay_raw)`.
    weight: (f64, f64, f64),
}

/// Forward state of one frame, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct FrameTape {
    render: RenderTape,
    view_code: [f64; 2],
    caches: Vec<Vec<AnchorCache>>,
    offsets: Vec<usize>,
}

impl FrameTape {
    pub fn render_tape(&self) -> &RenderTape {
        &self.render
    }
}

/// Gradients for one layer's bundle; arrays are flat, anchor-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub feature: Vec<f64>,
    pub log_scaling: Vec<f64>,
    pub offsets: Vec<f64>,
    pub blend_fw: Vec<f64>,
    pub blend_bw: Vec<f64>,
    pub decoder: MlpGrad,
    pub field: Option<FieldGrad>,
}

impl BundleGrad {
    pub fn zeros(b: &Bundle) -> Self {
        let k = b.space.len();
        let sh = b.space.shape;
        BundleGrad {
            feature: vec![0.0; k * sh.feature_dim],
            log_scaling: vec![0.0; k * 2],
            offsets: vec![0.0; k * sh.n_offsets * 2],
            blend_fw: vec![0.0; k * 2],
            blend_bw: vec![0.0; k * 2],
            decoder: MlpGrad::zeros(&b.space.decoder),
            field: b.field.as_ref().map(FieldGrad::zeros),
        }
    }
}

/// Per-anchor observations gathered from one backward pass, consumed by densification.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorObservations {
    /// Sum over the anchor's Gaussians of the pixel-space center gradient norm.
    pub screen_grad: Vec<f64>,
    pub visible: Vec<bool>,
    /// Largest decoded opacity among the anchor's visible Gaussians.
    pub max_opacity: Vec<f64>,
}

fn layer_gaussians(
    layer: &Layer,
    view_code: [f64; 2],
    blend_cfg: &BlendConfig,
    out: &mut Vec<GaussianAttributes>,
) -> Result<Vec<AnchorCache>> {
    let space = &layer.bundle.space;
    let sh = space.shape;
    if space.decoder.in_dim != sh.feature_dim + 2 || space.decoder.out_dim != sh.n_offsets * ATTRS_PER_GAUSSIAN {
        return Err(Error::invalid("decoder shape does not match the anchor shape"));
    }
    let field = match (layer.tau, &layer.bundle.field) {
        (Some(_), None) => return Err(Error::invalid("layer asks for deformation but the bundle has no field")),
        (Some(t), Some(f)) => Some((t, f)),
        (None, _) => None,
    };
    let mut caches = Vec::with_capacity(space.len());
    let mut input = vec![0.0; sh.feature_dim + 2];
    for a in &space.anchors {
        let mut position = a.position;
        let mut log_s = a.log_scaling;
        let mut opacity_logit = vec![0.0; sh.n_offsets];
        let mut query = None;
        if let Some((tau, f)) = field {
            let (d, tape) = f.query_with_tape(a.position, tau);
            position = [position[0] + d.position[0], position[1] + d.position[1]];
            log_s = [log_s[0] + d.log_scaling[0], log_s[1] + d.log_scaling[1]];
            opacity_logit.copy_from_slice(&d.opacity);
            query = Some(tape);
        }
        let weight = match layer.blend {
            BlendMode::None => (1.0, 0.0, 0.0),
            BlendMode::Fixed(w) => (w, 0.0, 0.0),
            BlendMode::Learned(dir) => {
                let tau = layer.tau.unwrap_or(0.0);
                let p = match dir {
                    Direction::Forward => a.blend_fw,
                    Direction::Backward => a.blend_bw,
                };
                let (w, dwo, dwd) = blend_weight_grad(p.offset, p.decay(), tau, blend_cfg.lambda_decay);
                (w, dwo, dwd * sigmoid(p.decay_raw))
            }
        };
        input[..sh.feature_dim].copy_from_slice(&a.feature);
        input[sh.feature_dim..].copy_from_slice(&view_code);
        let mut hidden = vec![0.0; space.decoder.hidden];
        let mut o = vec![0.0; space.decoder.out_dim];
        space.decoder.forward_into(&input, &mut hidden, &mut o);
        let scaling = [exp(log_s[0]), exp(log_s[1])];
        for i in 0..sh.n_offsets {
            let r = &o[i * ATTRS_PER_GAUSSIAN..(i + 1) * ATTRS_PER_GAUSSIAN];
            let mx = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sigmoid(r[A_SCALE]);
            let my = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sigmoid(r[A_SCALE + 1]);
            out.push(GaussianAttributes {
                center: [position[0] + scaling[0] * a.offsets[i][0], position[1] + scaling[1] * a.offsets[i][1]],
                cov: rotated_covariance(r[A_ROT], scaling[0] * mx, scaling[1] * my),
                color: [sigmoid(r[A_COLOR]), sigmoid(r[A_COLOR + 1]), sigmoid(r[A_COLOR + 2])],
                opacity: weight.0 * sigmoid(r[A_OPACITY] + opacity_logit[i]),
                depth_key: r[A_DEPTH],
            });
        }
        caches.push(AnchorCache { hidden, out: o, query, scaling, opacity_logit, weight });
    }
    Ok(caches)
}

/// All Gaussians of all layers, in layer order.
pub fn frame_gaussians(layers: &[Layer], view: &ViewTransform, cfg: &FrameConfig) -> Result<Vec<GaussianAttributes>> {
    let mut gs = Vec::new();
    for l in layers {
        layer_gaussians(l, view.view_code(), &cfg.blend, &mut gs)?;
    }
    Ok(gs)
}

pub fn forward(layers: &[Layer], view: &ViewTransform, cfg: &FrameConfig) -> Result<(Image, FrameTape)> {
    let view_code = view.view_code();
    let mut gs = Vec::new();
    let mut caches = Vec::with_capacity(layers.len());
    let mut offsets = Vec::with_capacity(layers.len());
    for l in layers {
        offsets.push(gs.len());
        caches.push(layer_gaussians(l, view_code, &cfg.blend, &mut gs)?);
    }
    let (img, render) = render_with_tape(&gs, view, &cfg.render)?;
    Ok((img, FrameTape { render, view_code, caches, offsets }))
}

pub fn render_frame(layers: &[Layer], view: &ViewTransform, cfg: &FrameConfig) -> Result<Image> {
    forward(layers, view, cfg).map(|(img, _)| img)
}

/// Gradients for every layer's bundle given `dL/dImage`; groups outside `mask` stay exactly zero.
pub fn backward(
    layers: &[Layer],
    tape: &FrameTape,
    dimage: &Image,
    mask: &TrainMask,
) -> Result<(Vec<BundleGrad>, Vec<AnchorObservations>)> {
    if layers.len() != tape.caches.len() {
        return Err(Error::invalid("layers do not match the recorded frame"));
    }
    let ggrads = render_backward(&tape.render, dimage)?;
    let visible = tape.render.visible();
    let mut grads = Vec::with_capacity(layers.len());
    let mut observations = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let space = &layer.bundle.space;
        let sh = space.shape;
        let caches = &tape.caches[li];
        if caches.len() != space.len() {
            return Err(Error::invalid("bundle changed since the forward pass"));
        }
        let mut g = BundleGrad::zeros(layer.bundle);
        let mut obs = AnchorObservations {
            screen_grad: vec![0.0; space.len()],
            visible: vec![false; space.len()],
            max_opacity: vec![0.0; space.len()],
        };
        let field = layer.bundle.field.as_ref().filter(|_| layer.tau.is_some());
        let mut input = vec![0.0; sh.feature_dim + 2];
        let mut dout = vec![0.0; space.decoder.out_dim];
        let mut dinput = vec![0.0; sh.feature_dim + 2];
        let mut scratch = vec![0.0; space.decoder.hidden];
        let mut ddelta = vec![0.0; 4 + sh.n_offsets];
        for (k, (a, c)) in space.anchors.iter().zip(caches).enumerate() {
            let base = tape.offsets[li] + k * sh.n_offsets;
            let mut ds = [0.0f64; 2];
            let mut dpos = [0.0f64; 2];
            let mut dw = 0.0;
            dout.iter_mut().for_each(|v| *v = 0.0);
            ddelta.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..sh.n_offsets {
                let gg = &ggrads[base + i];
                let r = &c.out[i * ATTRS_PER_GAUSSIAN..(i + 1) * ATTRS_PER_GAUSSIAN];
                let d = &mut dout[i * ATTRS_PER_GAUSSIAN..(i + 1) * ATTRS_PER_GAUSSIAN];
                if visible[base + i] {
                    obs.visible[k] = true;
                    let op = c.weight.0 * sigmoid(r[A_OPACITY] + c.opacity_logit[i]);
                    obs.max_opacity[k] = obs.max_opacity[k].max(op);
                    obs.screen_grad[k] += crate::math::sqrt(gg.center_px[0] * gg.center_px[0] + gg.center_px[1] * gg.center_px[1]);
                }
                // colour
                for ch in 0..3 {
                    let col = sigmoid(r[A_COLOR + ch]);
                    d[A_COLOR + ch] = gg.color[ch] * col * (1.0 - col);
                }
                // opacity = w · sigmoid(raw + Δo)
                let so = sigmoid(r[A_OPACITY] + c.opacity_logit[i]);
                let draw = gg.opacity * c.weight.0 * so * (1.0 - so);
                d[A_OPACITY] = draw;
                ddelta[4 + i] += draw;
                dw += gg.opacity * so;
                // covariance from θ and the two axis scales
                let sig_x = sigmoid(r[A_SCALE]);
                let sig_y = sigmoid(r[A_SCALE + 1]);
                let mx = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sig_x;
                let my = SCALE_FLOOR + (1.0 - SCALE_FLOOR) * sig_y;
                let sx = c.scaling[0] * mx;
                let sy = c.scaling[1] * my;
                let (x2, y2) = (sx * sx, sy * sy);
                let (sn, cs) = crate::math::sin_cos(r[A_ROT]);
                let [gxx, gxy, gyy] = gg.cov;
                let d_x2 = gxx * cs * cs + gxy * cs * sn + gyy * sn * sn;
                let d_y2 = gxx * sn * sn - gxy * cs * sn + gyy * cs * cs;
                d[A_ROT] = gxx * (2.0 * cs * sn * (y2 - x2))
                    + gxy * (cs * cs - sn * sn) * (x2 - y2)
                    + gyy * (2.0 * cs * sn * (x2 - y2));
                let d_sx = 2.0 * sx * d_x2;
                let d_sy = 2.0 * sy * d_y2;
                d[A_SCALE] = d_sx * c.scaling[0] * (1.0 - SCALE_FLOOR) * sig_x * (1.0 - sig_x);
                d[A_SCALE + 1] = d_sy * c.scaling[1] * (1.0 - SCALE_FLOOR) * sig_y * (1.0 - sig_y);
                d[A_DEPTH] = 0.0;
                ds[0] += d_sx * mx;
                ds[1] += d_sy * my;
                // center = p' + s' ⊙ O_i
                let o = a.offsets[i];
                ds[0] += gg.center[0] * o[0];
                ds[1] += gg.center[1] * o[1];
                dpos[0] += gg.center[0];
                dpos[1] += gg.center[1];
                if mask.anchors {
                    let off = (k * sh.n_offsets + i) * 2;
                    g.offsets[off] += gg.center[0] * c.scaling[0];
                    g.offsets[off + 1] += gg.center[1] * c.scaling[1];
                }
            }
            let dlog = [ds[0] * c.scaling[0], ds[1] * c.scaling[1]];
            if mask.anchors {
                g.log_scaling[2 * k] += dlog[0];
                g.log_scaling[2 * k + 1] += dlog[1];
            }
            if mask.blend {
                if let BlendMode::Learned(dir) = layer.blend {
                    let dst = match dir {
                        Direction::Forward => &mut g.blend_fw,
                        Direction::Backward => &mut g.blend_bw,
                    };
                    dst[2 * k] += dw * c.weight.1;
                    dst[2 * k + 1] += dw * c.weight.2;
                }
            }
            if mask.anchors || mask.decoder {
                input[..sh.feature_dim].copy_from_slice(&a.feature);
                input[sh.feature_dim..].copy_from_slice(&tape.view_code);
                dinput.iter_mut().for_each(|v| *v = 0.0);
                space.decoder.backward(
                    &input,
                    &c.hidden,
                    &dout,
                    if mask.decoder { Some(&mut g.decoder) } else { None },
                    if mask.anchors { Some(&mut dinput) } else { None },
                    &mut scratch,
                );
                if mask.anchors {
                    g.feature[k * sh.feature_dim..(k + 1) * sh.feature_dim]
                        .copy_from_slice(&dinput[..sh.feature_dim]);
                }
            }
            if mask.field {
                if let (Some(f), Some(qt)) = (field, &c.query) {
                    ddelta[0] = dpos[0];
                    ddelta[1] = dpos[1];
                    ddelta[2] = dlog[0];
                    ddelta[3] = dlog[1];
                    f.backward(qt, &ddelta, g.field.as_mut().unwrap(), true);
                }
            }
        }
        grads.push(g);
        observations.push(obs);
    }
    Ok((grads, observations))
}

/// Weighted identity penalty `λ/K · Σ_k ‖delta(p_k, 0)‖²`; adds its gradient into `grad`.
pub fn identity_penalty(
    space: &AnchorSpace,
    field: &DeformationField,
    lambda: f64,
    grad: Option<&mut FieldGrad>,
) -> f64 {
    if space.is_empty() || lambda == 0.0 {
        return 0.0;
    }
    let scale = lambda / space.len() as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for a in &space.anchors {
        let (d, tape) = field.query_with_tape(a.position, 0.0);
        total += d.norm_sq();
        if let Some(g) = grad.as_deref_mut() {
            let dout: Vec<f64> = d
                .position
                .iter()
                .chain(&d.log_scaling)
                .chain(&d.opacity)
                .map(|v| 2.0 * scale * v)
                .collect();
            field.backward(&tape, &dout, g, true);
        }
    }
    scale * total
}
