//! Named parameter arrays, the Adam optimizer and a finite-difference checker.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::deform::FieldGrad;
use crate::math::sqrt;
use crate::mlp::{Mlp, MlpGrad};
use crate::model::{Bundle, BundleGrad};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Every trainable scalar of a bundle, grouped in stable named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub arrays: Vec<ParamArray>,
}

/// Gradients share the parameter layout.
pub type GradBuffer = ParamSet;

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.iter_mut().find(|a| a.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray { name: a.name, shape: a.shape.clone(), data: vec![0.0; a.data.len()] })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Adds `scale · other` array by array.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn max_abs(&self, name: &str) -> f64 {
        self.get(name).map(|a| a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))).unwrap_or(0.0)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(ParamArray { name, shape, data });
    }
}

pub const ANCHOR_FEATURE: &str = "anchor.feature";
pub const ANCHOR_LOG_SCALING: &str = "anchor.log_scaling";
pub const ANCHOR_OFFSETS: &str = "anchor.offsets";
pub const ANCHOR_BLEND_FW: &str = "anchor.blend_fw";
pub const ANCHOR_BLEND_BW: &str = "anchor.blend_bw";

fn push_mlp(set: &mut ParamSet, prefix: [&'static str; 4], m: &Mlp, g: Option<&MlpGrad>) {
    let (w1, b1, w2, b2) = match g {
        Some(g) => (g.w1.clone(), g.b1.clone(), g.w2.clone(), g.b2.clone()),
        None => (m.w1.clone(), m.b1.clone(), m.w2.clone(), m.b2.clone()),
    };
    set.push(prefix[0], vec![m.hidden, m.in_dim], w1);
    set.push(prefix[1], vec![m.hidden], b1);
    set.push(prefix[2], vec![m.out_dim, m.hidden], w2);
    set.push(prefix[3], vec![m.out_dim], b2);
}

const DECODER: [&str; 4] = ["decoder.w1", "decoder.b1", "decoder.w2", "decoder.b2"];
const DEFORM_MLP: [&str; 4] = ["deform.w1", "deform.b1", "deform.w2", "deform.b2"];
const PLANES: [&str; 3] = ["deform.plane_xy", "deform.plane_xt", "deform.plane_yt"];

fn layout(b: &Bundle, g: Option<&BundleGrad>) -> ParamSet {
    let s = &b.space;
    let k = s.len();
    let f = s.shape.feature_dim;
    let i = s.shape.n_offsets;
    let mut set = ParamSet::default();
    match g {
        Some(g) => {
            set.push(ANCHOR_FEATURE, vec![k, f], g.feature.clone());
            set.push(ANCHOR_LOG_SCALING, vec![k, 2], g.log_scaling.clone());
            set.push(ANCHOR_OFFSETS, vec![k, i, 2], g.offsets.clone());
            set.push(ANCHOR_BLEND_FW, vec![k, 2], g.blend_fw.clone());
            set.push(ANCHOR_BLEND_BW, vec![k, 2], g.blend_bw.clone());
        }
        None => {
            set.push(ANCHOR_FEATURE, vec![k, f], s.anchors.iter().flat_map(|a| a.feature.iter().copied()).collect());
            set.push(ANCHOR_LOG_SCALING, vec![k, 2], s.anchors.iter().flat_map(|a| a.log_scaling).collect());
            set.push(
                ANCHOR_OFFSETS,
                vec![k, i, 2],
                s.anchors.iter().flat_map(|a| a.offsets.iter().flat_map(|o| *o)).collect(),
            );
            set.push(
                ANCHOR_BLEND_FW,
                vec![k, 2],
                s.anchors.iter().flat_map(|a| [a.blend_fw.offset, a.blend_fw.decay_raw]).collect(),
            );
            set.push(
                ANCHOR_BLEND_BW,
                vec![k, 2],
                s.anchors.iter().flat_map(|a| [a.blend_bw.offset, a.blend_bw.decay_raw]).collect(),
            );
        }
    }
    push_mlp(&mut set, DECODER, &s.decoder, g.map(|g| &g.decoder));
    if let Some(field) = &b.field {
        let r = field.resolution;
        let c = field.channels;
        let fg: Option<&FieldGrad> = g.and_then(|g| g.field.as_ref());
        for (p, name) in PLANES.iter().enumerate() {
            let data = match fg {
                Some(fg) => fg.planes[p].clone(),
                None => field.planes[p].clone(),
            };
            set.push(name, vec![r, r, c], data);
        }
        push_mlp(&mut set, DEFORM_MLP, &field.mlp, fg.map(|g| &g.mlp));
    }
    set
}

/// Copies a bundle's trainable values into a [`ParamSet`].
pub fn gather(b: &Bundle) -> ParamSet {
    layout(b, None)
}

/// Lays out bundle gradients with the names and shapes of [`gather`].
pub fn grad_buffer(b: &Bundle, g: &BundleGrad) -> GradBuffer {
    if b.field.is_some() && g.field.is_none() {
        let mut g = g.clone();
        g.field = b.field.as_ref().map(FieldGrad::zeros);
        return layout(b, Some(&g));
    }
    layout(b, Some(g))
}

/// Writes a [`ParamSet`] back into the bundle it was gathered from.
pub fn scatter(b: &mut Bundle, set: &ParamSet) -> Result<()> {
    if !gather(b).same_layout(set) {
        return Err(Error::invalid("parameter set does not match the bundle layout"));
    }
    let get = |n: &str| &set.get(n).unwrap().data;
    let sh = b.space.shape;
    let (feat, ls, offs, fw, bw) =
        (get(ANCHOR_FEATURE), get(ANCHOR_LOG_SCALING), get(ANCHOR_OFFSETS), get(ANCHOR_BLEND_FW), get(ANCHOR_BLEND_BW));
    for (k, a) in b.space.anchors.iter_mut().enumerate() {
        a.feature.copy_from_slice(&feat[k * sh.feature_dim..(k + 1) * sh.feature_dim]);
        a.log_scaling = [ls[2 * k], ls[2 * k + 1]];
        for (i, o) in a.offsets.iter_mut().enumerate() {
            let j = (k * sh.n_offsets + i) * 2;
            *o = [offs[j], offs[j + 1]];
        }
        a.blend_fw.offset = fw[2 * k];
        a.blend_fw.decay_raw = fw[2 * k + 1];
        a.blend_bw.offset = bw[2 * k];
        a.blend_bw.decay_raw = bw[2 * k + 1];
    }
    let d = &mut b.space.decoder;
    d.w1.copy_from_slice(get(DECODER[0]));
    d.b1.copy_from_slice(get(DECODER[1]));
    d.w2.copy_from_slice(get(DECODER[2]));
    d.b2.copy_from_slice(get(DECODER[3]));
    if let Some(f) = &mut b.field {
        for (p, name) in PLANES.iter().enumerate() {
            f.planes[p].copy_from_slice(get(name));
        }
        f.mlp.w1.copy_from_slice(get(DEFORM_MLP[0]));
        f.mlp.b1.copy_from_slice(get(DEFORM_MLP[1]));
        f.mlp.w2.copy_from_slice(get(DEFORM_MLP[2]));
        f.mlp.b2.copy_from_slice(get(DEFORM_MLP[3]));
    }
    Ok(())
}

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrTable {
    pub feature: f64,
    pub offsets: f64,
    pub scaling: f64,
    pub decoder: f64,
    pub grids: f64,
    pub deform_mlp: f64,
    pub blend: f64,
}

impl Default for LrTable {
    fn default() -> Self {
        LrTable {
            feature: 2.5e-3,
            offsets: 1e-3,
            scaling: 5e-3,
            decoder: 2e-3,
            grids: 1.6e-2,
            deform_mlp: 2e-3,
            blend: 0.1,
        }
    }
}

impl LrTable {
    pub fn for_array(&self, name: &str) -> f64 {
        match name {
            ANCHOR_FEATURE => self.feature,
            ANCHOR_OFFSETS => self.offsets,
            ANCHOR_LOG_SCALING => self.scaling,
            ANCHOR_BLEND_FW | ANCHOR_BLEND_BW => self.blend,
            n if n.starts_with("decoder.") => self.decoder,
            n if n.starts_with("deform.plane") => self.grids,
            n if n.starts_with("deform.") => self.deform_mlp,
            _ => 0.0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: LrTable,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr: LrTable) -> Self {
        OptimizerState {
            step: 0,
            m: params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            v: params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect(),
            lr,
        }
    }

    /// Re-indexes per-anchor moment rows after densification. `origin[new] = Some(old)` keeps
    /// the old row; `None` starts from zero moments.
    pub fn remap_anchor_rows(&mut self, params_before: &ParamSet, origin: &[Option<usize>]) {
        for (idx, a) in params_before.arrays.iter().enumerate() {
            if !a.name.starts_with("anchor.") {
                continue;
            }
            let rows = a.shape[0];
            let width = if rows == 0 { 0 } else { a.data.len() / rows };
            for moments in [&mut self.m[idx], &mut self.v[idx]] {
                let mut out = vec![0.0; origin.len() * width];
                for (new, o) in origin.iter().enumerate() {
                    if let Some(old) = *o {
                        out[new * width..(new + 1) * width].copy_from_slice(&moments[old * width..(old + 1) * width]);
                    }
                }
                *moments = out;
            }
        }
    }
}

/// One Adam update. Non-finite gradients abort the step before anything is modified.
pub fn adam_step(params: &mut ParamSet, grads: &GradBuffer, state: &mut OptimizerState) -> Result<()> {
    if !params.same_layout(grads) || state.m.len() != params.arrays.len() {
        return Err(Error::invalid("optimizer, parameter and gradient layouts differ"));
    }
    for g in &grads.arrays {
        if let Some(index) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: g.name, index });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - crate::math::powi(ADAM_BETA1, t);
    let bc2 = 1.0 - crate::math::powi(ADAM_BETA2, t);
    for (idx, (p, g)) in params.arrays.iter_mut().zip(&grads.arrays).enumerate() {
        let lr = state.lr.for_array(p.name);
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            if lr == 0.0 {
                continue;
            }
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p.data[j] -= lr * mh / (sqrt(vh) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Fails with [`Error::FrozenLeak`] when any array outside `trainable` has a nonzero gradient.
pub fn check_frozen(grads: &GradBuffer, trainable: impl Fn(&str) -> bool) -> Result<()> {
    for a in &grads.arrays {
        if !trainable(a.name) && a.data.iter().any(|&v| v != 0.0) {
            return Err(Error::FrozenLeak { param: a.name });
        }
    }
    Ok(())
}

/// Largest `|analytic - numeric| / (|numeric| + 1e-8)` over all scalars, numeric by central
/// differences of `loss` with step `h`.
pub fn grad_check(
    params: &ParamSet,
    analytic: &GradBuffer,
    h: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> Result<GradCheckReport> {
    if !params.same_layout(analytic) {
        return Err(Error::invalid(format!("gradient layout differs from parameters")));
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = params.clone();
    for (ai, a) in params.arrays.iter().enumerate() {
        for j in 0..a.data.len() {
            let x = a.data[j];
            probe.arrays[ai].data[j] = x + h;
            let fp = loss(&probe);
            probe.arrays[ai].data[j] = x - h;
            let fm = loss(&probe);
            probe.arrays[ai].data[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let an = analytic.arrays[ai].data[j];
            let rel = (an - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((a.name, j, an, numeric));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(array, index, analytic, numeric)` of the worst scalar.
    pub worst: Option<(&'static str, usize, f64, f64)>,
    pub checked: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(x: f64) -> ParamSet {
        ParamSet { arrays: vec![ParamArray { name: ANCHOR_FEATURE, shape: vec![1], data: vec![x] }] }
    }

    fn lr(x: f64) -> LrTable {
        LrTable { feature: x, ..LrTable::default() }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_set(1.5);
        let mut st = OptimizerState::new(&p, lr(0.1));
        adam_step(&mut p, &scalar_set(0.0), &mut st).unwrap();
        assert_eq!(p.arrays[0].data[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_set(0.0);
        let mut st = OptimizerState::new(&p, lr(0.1));
        adam_step(&mut p, &scalar_set(1.0), &mut st).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        assert!((p.arrays[0].data[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scripted_reference() {
        let g = 0.37;
        let lr_v = 0.05;
        let mut p = scalar_set(2.0);
        let mut st = OptimizerState::new(&p, lr(lr_v));
        adam_step(&mut p, &scalar_set(g), &mut st).unwrap();
        adam_step(&mut p, &scalar_set(g), &mut st).unwrap();
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr_v * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.arrays[0].data[0] - x).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar_set(1.0);
        let mut st = OptimizerState::new(&p, lr(0.1));
        let err = adam_step(&mut p, &scalar_set(f64::NAN), &mut st).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { param: ANCHOR_FEATURE, index: 0 });
        assert_eq!(p.arrays[0].data[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_check_flags_leaks() {
        let g = scalar_set(1e-30);
        assert_eq!(check_frozen(&g, |_| false), Err(Error::FrozenLeak { param: ANCHOR_FEATURE }));
        assert!(check_frozen(&g, |_| true).is_ok());
        assert!(check_frozen(&scalar_set(0.0), |_| false).is_ok());
    }

    #[test]
    fn grad_check_on_quadratic() {
        let p = scalar_set(3.0);
        let exact = scalar_set(6.0);
        let r = grad_check(&p, &exact, 1e-4, |s| s.arrays[0].data[0].powi(2)).unwrap();
        assert!(r.max_rel_error < 1e-9);
        let wrong = scalar_set(5.0);
        assert!(grad_check(&p, &wrong, 1e-4, |s| s.arrays[0].data[0].powi(2)).unwrap().max_rel_error > 0.1);
    }
}
