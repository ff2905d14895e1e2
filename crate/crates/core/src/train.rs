//! Optimization loops for the four training stages and the naive chunk-wise variant.
//!
//! These functions work on in-memory bundles; loading, saving and residency
//! bookkeeping are the caller's job.

use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blend::{chunk_layers, Direction};
use crate::deform::{DeformConfig, DeformationField};
use crate::diff::{adam_step, check_frozen, gather, grad_buffer, scatter, LrTable, OptimizerState};
use crate::fhd::{accumulate_stats, grow_and_prune, DensifyConfig, DensifyReport};
use crate::image::Image;
use crate::loss::{photometric_loss, LossConfig};
use crate::metrics::psnr;
use crate::model::{backward, forward, identity_penalty, BlendMode, Bundle, FrameConfig, Layer, TrainMask};
use crate::render::ViewTransform;
use crate::scenegen::FrameSequence;
use crate::schedule::{FrameRange, TrainPlan, WindowKind};
use crate::{Error, Result};

/// Anything that can hand out training targets.
pub trait FrameSource {
    fn views(&self) -> &[ViewTransform];
    fn frame_count(&self) -> usize;
    fn target(&self, view: usize, t: usize) -> Image;
}

impl FrameSource for FrameSequence {
    fn views(&self) -> &[ViewTransform] {
        &self.views
    }

    fn frame_count(&self) -> usize {
        self.len()
    }

    fn target(&self, view: usize, t: usize) -> Image {
        self.image(view, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: LrTable,
    pub loss: LossConfig,
    pub frame: FrameConfig,
    pub densify: DensifyConfig,
    pub deform: DeformConfig,
    /// Densify (with unit level weights) while training the global space.
    pub gca_densify: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: LrTable::default(),
            loss: LossConfig::default(),
            frame: FrameConfig::default(),
            densify: DensifyConfig::default(),
            deform: DeformConfig::default(),
            gca_densify: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gca,
    Kfa,
    Pwd,
    Ifb,
    Naive,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gca => "gca",
            Stage::Kfa => "kfa",
            Stage::Pwd => "pwd",
            Stage::Ifb => "ifb",
            Stage::Naive => "naive",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent<'a> {
    Step { stage: Stage, n: usize, j: usize, t: usize, view: usize, loss: f64, psnr: f64 },
    Densify { stage: Stage, n: usize, j: usize, report: &'a DensifyReport },
}

/// Deterministic generator for one stage unit.
pub fn stage_rng(seed: u64, stage: Stage, n: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.tag().wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((n as u64 + 1).wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn pick(rng: &mut ChaCha8Rng, window: FrameRange, views: usize) -> (usize, usize) {
    let t = rng.random_range(window.lo..=window.hi);
    let v = rng.random_range(0..views);
    (t, v)
}

/// Densification settings for one optimization loop.
#[derive(Debug, Clone, Copy)]
struct DensifyPlan {
    cfg: DensifyConfig,
    /// Steps from this index on never prune.
    prune_until: usize,
}

struct Single<'b> {
    bundle: &'b mut Bundle,
    opt: OptimizerState,
}

impl<'b> Single<'b> {
    fn new(bundle: &'b mut Bundle, lr: LrTable) -> Self {
        let opt = OptimizerState::new(&gather(bundle), lr);
        Single { bundle, opt }
    }

    fn densify(&mut self, d: &DensifyPlan, j: usize, rng: &mut ChaCha8Rng) -> DensifyReport {
        let before = gather(self.bundle);
        let report = grow_and_prune(&mut self.bundle.space, &d.cfg, j < d.prune_until, rng);
        self.opt.remap_anchor_rows(&before, &report.origin);
        report
    }
}

#[allow(clippy::too_many_arguments)]
fn single_bundle_loop(
    stage: Stage,
    n: usize,
    bundle: &mut Bundle,
    frames: &dyn FrameSource,
    window: FrameRange,
    tau_of: &dyn Fn(usize) -> Result<Option<f64>>,
    iters: usize,
    densify: Option<DensifyPlan>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let views = frames.views().len();
    let mut s = Single::new(bundle, cfg.lr);
    let lambda_id = if s.bundle.field.is_some() { cfg.deform.lambda_identity } else { 0.0 };
    for j in 0..iters {
        let (t, v) = pick(rng, window, views);
        let tau = tau_of(t)?;
        let target = frames.target(v, t);
        let view = frames.views()[v];
        let layer = Layer { bundle: &*s.bundle, tau, blend: BlendMode::None };
        let (img, tape) = forward(&[layer], &view, &cfg.frame)?;
        let (mut loss, dimg) = photometric_loss(&img, &target, &cfg.loss)?;
        let (mut grads, obs) = backward(&[layer], &tape, &dimg, &TrainMask::NO_BLEND)?;
        let mut g = grads.pop().unwrap();
        if let (Some(field), Some(fg)) = (&s.bundle.field, g.field.as_mut()) {
            loss += identity_penalty(&s.bundle.space, field, lambda_id, Some(fg));
        }
        let gb = grad_buffer(s.bundle, &g);
        let mut params = gather(s.bundle);
        adam_step(&mut params, &gb, &mut s.opt)?;
        scatter(s.bundle, &params)?;
        on_event(TrainEvent::Step { stage, n, j, t, view: v, loss, psnr: psnr(&img, &target) });
        if let Some(d) = densify {
            accumulate_stats(&mut s.bundle.space, &obs[0], j, iters, &d.cfg)?;
            if (j + 1) % d.cfg.interval.max(1) == 0 && j + 1 < iters {
                let report = s.densify(&d, j, rng);
                on_event(TrainEvent::Densify { stage, n, j, report: &report });
            }
        }
    }
    s.bundle.space.reset_stats();
    Ok(())
}

/// Trains the global space over every frame with no temporal model.
pub fn train_gca(
    bundle: &mut Bundle,
    frames: &dyn FrameSource,
    plan: &TrainPlan,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let window = FrameRange { lo: 0, hi: frames.frame_count() - 1 };
    let mut d = cfg.densify;
    d.enabled = false;
    let densify = cfg.gca_densify.then_some(DensifyPlan { cfg: d, prune_until: plan.iters.gca });
    let mut rng = stage_rng(plan.seed, Stage::Gca, 0);
    single_bundle_loop(Stage::Gca, 0, bundle, frames, window, &|_| Ok(None), plan.iters.gca, densify, cfg, &mut rng, on_event)
}

/// Fine-tunes key bundle `n` on frames within the tolerance window of its key frame.
pub fn train_kfa(
    bundle: &mut Bundle,
    n: usize,
    frames: &dyn FrameSource,
    plan: &TrainPlan,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let window = plan.window_of(WindowKind::Eps, n)?;
    let densify = Some(DensifyPlan { cfg: cfg.densify, prune_until: plan.iters.kfa });
    let mut rng = stage_rng(plan.seed, Stage::Kfa, n);
    single_bundle_loop(Stage::Kfa, n, bundle, frames, window, &|_| Ok(None), plan.iters.kfa, densify, cfg, &mut rng, on_event)
}

/// Attaches a fresh deformation field to key bundle `n` and trains both over its window.
pub fn train_pwd(
    bundle: &mut Bundle,
    n: usize,
    frames: &dyn FrameSource,
    plan: &TrainPlan,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let window = plan.window_of(WindowKind::Bdw, n)?;
    if bundle.field.is_none() {
        let seed = stage_rng(plan.seed, Stage::Pwd, n).random();
        bundle.field = Some(DeformationField::new(n, bundle.space.shape.n_offsets, &cfg.deform, seed));
    }
    let iters = plan.iters.pwd;
    let freeze = ((1.0 - cfg.densify.prune_freeze.clamp(0.0, 1.0)) * iters as f64) as usize;
    let densify = Some(DensifyPlan { cfg: cfg.densify, prune_until: freeze });
    let mut rng = stage_rng(plan.seed, Stage::Pwd, n);
    let tau_of = |t: usize| plan.tau(t, n).map(Some);
    single_bundle_loop(Stage::Pwd, n, bundle, frames, window, &tau_of, iters, densify, cfg, &mut rng, on_event)
}

/// Frames of chunk `n` used for blending. The last chunk trains alone and is
/// skipped when it holds only its key frame.
pub fn blend_window(plan: &TrainPlan, n: usize) -> Result<Option<FrameRange>> {
    let chunk = plan.window_of(WindowKind::Chunk, n)?;
    if n + 1 < plan.keys() {
        return Ok(Some(chunk));
    }
    Ok((chunk.hi > chunk.lo).then_some(chunk))
}

fn is_blend(name: &str) -> bool {
    name == crate::diff::ANCHOR_BLEND_FW || name == crate::diff::ANCHOR_BLEND_BW
}

/// Trains only the temporal-opacity parameters of chunk `n`: forward parameters of
/// `own` and backward parameters of `next`. Everything else stays frozen; a
/// nonzero gradient on a frozen array aborts with [`Error::FrozenLeak`].
pub fn train_ifb(
    own: &mut Bundle,
    mut next: Option<&mut Bundle>,
    n: usize,
    frames: &dyn FrameSource,
    plan: &TrainPlan,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let Some(window) = blend_window(plan, n)? else { return Ok(()) };
    if (n + 1 < plan.keys()) != next.is_some() {
        return Err(Error::invalid("blending needs the next key bundle exactly when one exists"));
    }
    let views = frames.views().len();
    let mut rng = stage_rng(plan.seed, Stage::Ifb, n);
    let mut opt_own = OptimizerState::new(&gather(own), cfg.lr);
    let mut opt_next = next.as_deref().map(|b| OptimizerState::new(&gather(b), cfg.lr));
    for j in 0..plan.iters.ifb {
        let (t, v) = pick(&mut rng, window, views);
        let target = frames.target(v, t);
        let view = frames.views()[v];
        let layers = chunk_layers(plan, n, t, own, next.as_deref())?;
        let (img, tape) = forward(&layers, &view, &cfg.frame)?;
        let (loss, dimg) = photometric_loss(&img, &target, &cfg.loss)?;
        let (grads, _) = backward(&layers, &tape, &dimg, &TrainMask::BLEND_ONLY)?;
        let gb_own = grad_buffer(own, &grads[0]);
        check_frozen(&gb_own, is_blend)?;
        let gb_next = match next.as_deref() {
            Some(b) => {
                let g = grad_buffer(b, &grads[1]);
                check_frozen(&g, is_blend)?;
                Some(g)
            }
            None => None,
        };
        let mut p = gather(own);
        adam_step(&mut p, &gb_own, &mut opt_own)?;
        scatter(own, &p)?;
        if let (Some(b), Some(g), Some(o)) = (next.as_deref_mut(), gb_next, opt_next.as_mut()) {
            let mut p = gather(b);
            adam_step(&mut p, &g, o)?;
            scatter(b, &p)?;
        }
        on_event(TrainEvent::Step { stage: Stage::Ifb, n, j, t, view: v, loss, psnr: psnr(&img, &target) });
    }
    Ok(())
}

/// Naive chunk-wise training: both key bundles of chunk `n` are optimized jointly
/// on the chunk's frames with every parameter group unfrozen and densification on.
/// Re-running this for chunk `n` modifies the bundle shared with chunk `n - 1`.
pub fn train_naive_chunk(
    own: &mut Bundle,
    next: &mut Bundle,
    n: usize,
    iters: usize,
    frames: &dyn FrameSource,
    plan: &TrainPlan,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent),
) -> Result<()> {
    let window = plan.window_of(WindowKind::Chunk, n)?;
    for (b, k) in [(&mut *own, n), (&mut *next, n + 1)] {
        if b.field.is_none() {
            let seed = stage_rng(plan.seed, Stage::Naive, k).random();
            b.field = Some(DeformationField::new(k, b.space.shape.n_offsets, &cfg.deform, seed));
        }
    }
    let views = frames.views().len();
    let mut rng = stage_rng(plan.seed, Stage::Naive, n);
    let mut s_own = Single::new(own, cfg.lr);
    let mut s_next = Single::new(next, cfg.lr);
    let d = DensifyPlan { cfg: cfg.densify, prune_until: iters };
    for j in 0..iters {
        let (t, v) = pick(&mut rng, window, views);
        let target = frames.target(v, t);
        let view = frames.views()[v];
        let layers = vec![
            Layer { bundle: &*s_own.bundle, tau: Some(plan.tau(t, n)?), blend: BlendMode::Learned(Direction::Forward) },
            Layer {
                bundle: &*s_next.bundle,
                tau: Some(plan.tau(t, n + 1)?),
                blend: BlendMode::Learned(Direction::Backward),
            },
        ];
        let (img, tape) = forward(&layers, &view, &cfg.frame)?;
        let (loss, dimg) = photometric_loss(&img, &target, &cfg.loss)?;
        let (grads, obs) = backward(&layers, &tape, &dimg, &TrainMask::ALL)?;
        for (s, (g, o)) in [&mut s_own, &mut s_next].into_iter().zip(grads.iter().zip(&obs)) {
            let gb = grad_buffer(s.bundle, g);
            let mut p = gather(s.bundle);
            adam_step(&mut p, &gb, &mut s.opt)?;
            scatter(s.bundle, &p)?;
            accumulate_stats(&mut s.bundle.space, o, j, iters, &d.cfg)?;
        }
        on_event(TrainEvent::Step { stage: Stage::Naive, n, j, t, view: v, loss, psnr: psnr(&img, &target) });
        if (j + 1) % d.cfg.interval.max(1) == 0 && j + 1 < iters {
            for s in [&mut s_own, &mut s_next] {
                let report = s.densify(&d, j, &mut rng);
                on_event(TrainEvent::Densify { stage: Stage::Naive, n, j, report: &report });
            }
        }
    }
    s_own.bundle.space.reset_stats();
    s_next.bundle.space.reset_stats();
    Ok(())
}

/// Mean PSNR over every view of the listed frames, using `render` to produce each frame.
pub fn mean_psnr(
    frames: &dyn FrameSource,
    ts: impl IntoIterator<Item = usize>,
    mut render: impl FnMut(usize, &ViewTransform) -> Result<Image>,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for t in ts {
        for (v, view) in frames.views().iter().enumerate() {
            let img = render(t, view)?;
            acc += psnr(&img.quantized(), &frames.target(v, t)).min(100.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(acc / count as f64)
}
