use std::collections::BTreeSet;
use std::sync::OnceLock;

use morel_core::blend::blend_frame;
use morel_core::diff::{gather, ANCHOR_BLEND_BW, ANCHOR_BLEND_FW};
use morel_core::fhd::assign_levels;
use morel_core::loss::photometric_loss;
use morel_core::metrics::psnr;
use morel_core::model::{render_frame, BlendMode, Bundle, Layer};
use morel_core::scene::{init_anchor_space, AnchorShape};
use morel_core::scenegen::{generate, sample_point_cloud, voxel_decimate, GroundTruth, SceneSpec};
use morel_core::schedule::{StageIters, TrainPlan};
use morel_core::train::{train_gca, train_ifb, train_kfa, train_pwd, TrainConfig, TrainEvent};

fn global_bundle(gt: &GroundTruth, frames: usize, voxel: f64) -> Bundle {
    let at: Vec<usize> = (0..frames).step_by(8).collect();
    let pts = sample_point_cloud(&gt.oracle, &at, 200, 1).unwrap();
    let (pts, _) = voxel_decimate(&pts, 0.01, 4000).unwrap();
    Bundle::new(init_anchor_space(&pts, voxel, 2, AnchorShape::default()).unwrap())
}

struct Fixture {
    gt: GroundTruth,
    plan: TrainPlan,
    cfg: TrainConfig,
    global: Bundle,
    /// Key bundles right after their key-frame stage.
    kfa: Vec<Bundle>,
    /// The same bundles after windowed deformation training.
    pwd: Vec<Bundle>,
}

/// 48 frames at GOP 16: three keys, two full chunks and a tail chunk.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SceneSpec { frames: 48, views: 2, width: 40, height: 40, static_count: 10, ..SceneSpec::default() };
        let gt = generate(&spec).unwrap();
        let plan = TrainPlan::new(48, 16, 1, StageIters { gca: 400, kfa: 250, pwd: 500, ifb: 60 }, 3).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.frame.render.alpha_min = 1.0 / 255.0;
        cfg.densify.interval = 50;
        let mut global = global_bundle(&gt, 48, 0.04);
        train_gca(&mut global, &gt.sequence, &plan, &cfg, &mut |_| {}).unwrap();
        assign_levels(&mut global.space, 0.6, 0.9).unwrap();
        let mut kfa = Vec::new();
        let mut pwd = Vec::new();
        for n in 0..plan.keys() {
            let mut b = Bundle::new(global.space.derive_keyframe_space(n, plan.gop).unwrap());
            train_kfa(&mut b, n, &gt.sequence, &plan, &cfg, &mut |_| {}).unwrap();
            kfa.push(b.clone());
            train_pwd(&mut b, n, &gt.sequence, &plan, &cfg, &mut |_| {}).unwrap();
            pwd.push(b);
        }
        Fixture { gt, plan, cfg, global, kfa, pwd }
    })
}

fn view_mean_psnr(f: &Fixture, t: usize, render: impl Fn(usize) -> morel_core::Image) -> f64 {
    let views = f.gt.sequence.views.len();
    (0..views).map(|v| psnr(&render(v).quantized(), &f.gt.sequence.image(v, t)).min(100.0)).sum::<f64>() / views as f64
}

#[test]
fn gca_sampler_visits_every_frame() {
    let spec = SceneSpec { frames: 240, views: 1, width: 16, height: 16, static_count: 4, ..SceneSpec::default() };
    let gt = generate(&spec).unwrap();
    let plan = TrainPlan::new(240, 40, 2, StageIters { gca: 3000, kfa: 1, pwd: 1, ifb: 1 }, 0).unwrap();
    let mut b = global_bundle(&gt, 240, 0.1);
    let mut seen = BTreeSet::new();
    train_gca(&mut b, &gt.sequence, &plan, &TrainConfig::default(), &mut |e| {
        if let TrainEvent::Step { t, .. } = e {
            seen.insert(t);
        }
    })
    .unwrap();
    assert_eq!(seen.len(), 240);
}

#[test]
fn zero_tolerance_samples_only_the_key_frame() {
    let f = fixture();
    let plan = TrainPlan { eps: 0, iters: StageIters { kfa: 40, ..f.plan.iters }, ..f.plan };
    let mut b = Bundle::new(f.global.space.derive_keyframe_space(1, plan.gop).unwrap());
    let mut ts = BTreeSet::new();
    train_kfa(&mut b, 1, &f.gt.sequence, &plan, &f.cfg, &mut |e| {
        if let TrainEvent::Step { t, .. } = e {
            ts.insert(t);
        }
    })
    .unwrap();
    assert_eq!(ts.into_iter().collect::<Vec<_>>(), [16]);
}

#[test]
fn key_frame_stage_beats_global_space_at_its_key_frame() {
    let f = fixture();
    for n in 1..f.plan.keys() {
        let t = f.plan.key_time(n);
        let g = view_mean_psnr(f, t, |v| {
            render_frame(&[Layer::canonical(&f.global)], &f.gt.sequence.views[v], &f.cfg.frame).unwrap()
        });
        let k = view_mean_psnr(f, t, |v| {
            render_frame(&[Layer::canonical(&f.kfa[n])], &f.gt.sequence.views[v], &f.cfg.frame).unwrap()
        });
        assert!(k >= g + 1.0, "key {n}: kfa {k:.2} dB vs global {g:.2} dB");
    }
}

#[test]
fn deformation_is_near_identity_at_the_key_frame() {
    let f = fixture();
    for n in 0..f.plan.keys() {
        let t = f.plan.key_time(n);
        for v in 0..f.gt.sequence.views.len() {
            let view = &f.gt.sequence.views[v];
            let before = render_frame(&[Layer::canonical(&f.kfa[n])], view, &f.cfg.frame).unwrap();
            let after = render_frame(&[Layer { bundle: &f.pwd[n], tau: Some(0.0), blend: BlendMode::None }], view, &f.cfg.frame)
                .unwrap();
            let p = psnr(&after.quantized(), &before.quantized());
            assert!(p >= 35.0, "key {n} view {v} at t={t}: {p:.2} dB");
        }
    }
}

#[test]
fn window_edges_render_finite_images() {
    let f = fixture();
    for n in 0..f.plan.keys() {
        for tau in [-1.0, 1.0] {
            let img = render_frame(&[Layer { bundle: &f.pwd[n], tau: Some(tau), blend: BlendMode::None }], &f.gt.sequence.views[0], &f.cfg.frame)
                .unwrap();
            assert!(img.data.iter().all(|v| v.is_finite()));
        }
    }
}

fn non_blend_arrays(b: &Bundle) -> Vec<(String, Vec<u64>)> {
    gather(b)
        .arrays
        .iter()
        .filter(|a| a.name != ANCHOR_BLEND_FW && a.name != ANCHOR_BLEND_BW)
        .map(|a| (a.name.to_string(), a.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn blending_stage_only_moves_blend_parameters() {
    let f = fixture();
    let (mut own, mut next) = (f.pwd[0].clone(), f.pwd[1].clone());
    train_ifb(&mut own, Some(&mut next), 0, &f.gt.sequence, &f.plan, &f.cfg, &mut |_| {}).unwrap();
    assert_eq!(non_blend_arrays(&own), non_blend_arrays(&f.pwd[0]));
    assert_eq!(non_blend_arrays(&next), non_blend_arrays(&f.pwd[1]));
    assert!(own.space.anchors.iter().zip(&f.pwd[0].space.anchors).any(|(a, b)| a.blend_fw != b.blend_fw));
    assert!(next.space.anchors.iter().zip(&f.pwd[1].space.anchors).any(|(a, b)| a.blend_bw != b.blend_bw));
    // Only the forward set of the earlier bundle and the backward set of the later one.
    assert!(own.space.anchors.iter().zip(&f.pwd[0].space.anchors).all(|(a, b)| a.blend_bw == b.blend_bw));
    assert!(next.space.anchors.iter().zip(&f.pwd[1].space.anchors).all(|(a, b)| a.blend_fw == b.blend_fw));
}

#[test]
fn blending_lowers_midpoint_loss() {
    let f = fixture();
    let mid = f.plan.key_time(0) + f.plan.gop / 2;
        let losses: Vec<f64> = (0..=6)
        .map(|k| {
            let (mut own, mut next) = (f.pwd[0].clone(), f.pwd[1].clone());
            if k > 0 {
                let plan = TrainPlan { iters: StageIters { ifb: 10 * k, ..f.plan.iters }, ..f.plan };
                train_ifb(&mut own, Some(&mut next), 0, &f.gt.sequence, &plan, &f.cfg, &mut |_| {}).unwrap();
            }
            (0..f.gt.sequence.views.len())
                .map(|v| {
                    let img = blend_frame(&f.plan, 0, mid, &own, Some(&next), &f.gt.sequence.views[v], &f.cfg.frame).unwrap();
                    photometric_loss(&img, &f.gt.sequence.image(v, mid), &f.cfg.loss).unwrap().0
                })
                .sum::<f64>()
        })
        .collect();
    // The stage fits the whole chunk, so the midpoint alone need not fall monotonically.
    for (k, l) in losses.iter().enumerate().skip(1) {
        assert!(*l < 0.8 * losses[0], "after {} steps: {losses:?}", 10 * k);
    }
}

#[test]
fn tail_chunk_trains_forward_parameters_alone() {
    let f = fixture();
    let n = f.plan.keys() - 1;
    let mut own = f.pwd[n].clone();
    train_ifb(&mut own, None, n, &f.gt.sequence, &f.plan, &f.cfg, &mut |_| {}).unwrap();
    assert_eq!(non_blend_arrays(&own), non_blend_arrays(&f.pwd[n]));
    // A partner where none exists is refused.
    let mut other = f.pwd[0].clone();
    assert!(train_ifb(&mut own, Some(&mut other), n, &f.gt.sequence, &f.plan, &f.cfg, &mut |_| {}).is_err());
}

#[test]
fn stage_runs_are_deterministic() {
    let f = fixture();
    let mut a = Bundle::new(f.global.space.derive_keyframe_space(2, f.plan.gop).unwrap());
    let mut b = a.clone();
    let plan = TrainPlan { iters: StageIters { kfa: 60, ..f.plan.iters }, ..f.plan };
    train_kfa(&mut a, 2, &f.gt.sequence, &plan, &f.cfg, &mut |_| {}).unwrap();
    train_kfa(&mut b, 2, &f.gt.sequence, &plan, &f.cfg, &mut |_| {}).unwrap();
    assert_eq!(gather(&a), gather(&b));
}
