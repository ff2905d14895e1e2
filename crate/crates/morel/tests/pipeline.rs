mod common;

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

use morel::inference::{render_sequence, FrameRenderer, Machinery, Manifest, MANIFEST};
use morel::pipeline::{units, Trainer, Unit, TRAIN_LOG};
use morel::store::{Action, BundleKey, LedgerEvent, Store};
use tempfile::TempDir;

struct Trained {
    _tmp: TempDir,
    data: PathBuf,
    store: PathBuf,
    events: Vec<LedgerEvent>,
}

/// One full tiny training run shared by the tests in this file.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        let store = tmp.path().join("store");
        let ds = common::tiny_dataset(&data);
        let mut tr = Trainer::new(&ds, &store, common::tiny_config()).unwrap();
        tr.run().unwrap();
        let events = tr.store().ledger().events().to_vec();
        Trained { _tmp: tmp, data, store, events }
    })
}

fn phase_stage(phase: &str) -> &str {
    phase.split(':').next().unwrap()
}

#[test]
fn training_residency_follows_the_stage_contract() {
    let t = trained();
    assert!(!t.events.is_empty());
    for e in &t.events {
        match phase_stage(&e.phase) {
            "gca" | "kfa" | "pwd" | "ifb-tail" => assert!(e.key_residency <= 1, "{e}"),
            "ifb" => assert!(e.key_residency <= 2, "{e}"),
            other => panic!("unexpected phase {other}"),
        }
    }
    // Every ifb unit reaches exactly two resident key spaces.
    let plan_keys = 4;
    for n in 0..plan_keys - 1 {
        let phase = format!("ifb:{n}");
        let peak = t.events.iter().filter(|e| e.phase == phase).map(|e| e.key_residency).max();
        assert_eq!(peak, Some(2), "{phase}");
    }
    let peak_outside = t.events.iter().filter(|e| !e.phase.starts_with("ifb:")).map(|e| e.key_residency).max();
    assert_eq!(peak_outside, Some(1));
}

#[test]
fn stage_order_is_visible_in_the_event_log() {
    let t = trained();
    let first = |phase: &str| t.events.iter().position(|e| e.phase == phase).unwrap();
    let last = |phase: &str| t.events.iter().rposition(|e| e.phase == phase).unwrap();
    for n in 0..4 {
        assert!(last("gca") < first(&format!("kfa:{n}")));
        assert!(last(&format!("kfa:{n}")) < first(&format!("pwd:{n}")));
    }
    for n in 0..3 {
        assert!(last(&format!("pwd:{n}")) < first(&format!("ifb:{n}")));
        assert!(last(&format!("pwd:{}", n + 1)) < first(&format!("ifb:{n}")));
    }
    // Every load is matched by an unload by the end of training.
    let loads = t.events.iter().filter(|e| e.action == Action::Load).count();
    let unloads = t.events.iter().filter(|e| e.action == Action::Unload).count();
    assert_eq!(loads, unloads);
    let log = fs::read_to_string(t.store.join(TRAIN_LOG)).unwrap();
    assert!(log.contains("begin ifb-tail 3"));
}

#[test]
fn sweep_loads_each_bundle_once_per_crossing() {
    let t = trained();
    let mut r = FrameRenderer::open(&t.store, Machinery::Blend).unwrap();
    let out = t._tmp.path().join("sweep");
    let m = render_sequence(&mut r, 0..26, 0, &out, None, "ppm").unwrap();
    let ev = r.store().ledger().events();
    // Pairs (0,1) (1,2) (2,3) then the single tail bundle.
    assert_eq!(r.store().ledger().loads(), 2 + 2 + 2 + 1);
    assert!(ev.iter().all(|e| e.key_residency <= 2));
    assert!(m.entries.iter().all(|e| e.resident.len() <= 2));
    for (k, e) in m.entries.iter().enumerate() {
        let n = k / 8;
        let want: Vec<usize> = if n < 3 { vec![n, n + 1] } else { vec![n] };
        assert_eq!(e.resident, want, "frame {k}");
    }
    // Loads happen only at boundary crossings, and never for a resident bundle.
    let load_frames: Vec<&str> = ev.iter().filter(|e| e.action == Action::Load).map(|e| e.phase.as_str()).collect();
    assert_eq!(load_frames, ["render:0", "render:0", "render:1", "render:1", "render:2", "render:2", "render:3"]);
    let text = fs::read_to_string(out.join(MANIFEST)).unwrap();
    assert_eq!(Manifest::from_text(&text).unwrap(), m);
}

#[test]
fn cold_random_access_matches_sweep() {
    let t = trained();
    let out = t._tmp.path().join("sweep_eq");
    let mut r = FrameRenderer::open(&t.store, Machinery::Blend).unwrap();
    render_sequence(&mut r, 0..26, 1, &out, None, "ppm").unwrap();
    for frame in [0usize, 7, 8, 13, 16, 23, 24, 25] {
        let mut cold = FrameRenderer::open(&t.store, Machinery::Blend).unwrap();
        let img = cold.render(frame, 1).unwrap();
        let want_loads = if frame >= 24 { 1 } else { 2 };
        assert_eq!(cold.store().ledger().loads(), want_loads, "frame {frame}");
        let swept = morel::imageio::read_frame(&out.join(format!("frame_{frame:05}.ppm"))).unwrap();
        assert_eq!(morel_core::image::Frame8::from_image(&img), swept, "frame {frame}");
        let again = cold.render(frame, 1).unwrap();
        assert_eq!(img.data, again.data);
        assert_eq!(cold.store().ledger().loads(), want_loads);
    }
}

#[test]
fn empty_range_gives_empty_manifest() {
    let t = trained();
    let mut r = FrameRenderer::open(&t.store, Machinery::Blend).unwrap();
    let m = render_sequence(&mut r, 5..5, 0, &t._tmp.path().join("empty"), None, "ppm").unwrap();
    assert!(m.entries.is_empty());
    assert_eq!(r.store().ledger().loads(), 0);
}

#[test]
fn boundary_frames_are_consistent_across_machinery() {
    let t = trained();
    let mut r = FrameRenderer::open(&t.store, Machinery::Blend).unwrap();
    for n in 0..3 {
        let tb = (n + 1) * 8;
        let old = r.render_in_chunk(n, tb, 0).unwrap();
        let new = r.render_in_chunk(n + 1, tb, 0).unwrap();
        let d = old.quantized().mean_abs_diff(&new.quantized());
        assert!(d.is_finite());
    }
}

#[test]
fn hard_switch_uses_one_bundle_per_chunk() {
    let t = trained();
    let mut r = FrameRenderer::open(&t.store, Machinery::HardSwitch).unwrap();
    let m = render_sequence(&mut r, 0..26, 0, &t._tmp.path().join("hard"), None, "ppm").unwrap();
    assert!(m.entries.iter().all(|e| e.resident.len() == 1));
    assert_eq!(r.store().ledger().loads(), 4);
}

#[test]
fn units_cover_every_stage_once() {
    let t = trained();
    let ds = morel::dataset::read_dataset(&t.data).unwrap();
    let tr = Trainer::new(&ds, &t.store, common::tiny_config()).unwrap();
    let u = units(tr.plan()).unwrap();
    assert_eq!(u.len(), 1 + 4 + 4 + 4);
    assert!(u.iter().all(|&x| tr.is_done(x)));
    assert_eq!(u.last(), Some(&Unit::Ifb(3)));
}

#[test]
fn pwd_leaves_other_key_bundles_untouched() {
    let tmp = TempDir::new().unwrap();
    let ds = common::tiny_dataset(&tmp.path().join("data"));
    let dir = tmp.path().join("store");
    let mut tr = Trainer::new(&ds, &dir, common::tiny_config()).unwrap();
    tr.run_until(Unit::Pwd(1)).unwrap();
    let probe = Store::open_existing(&dir).unwrap().path_of(BundleKey::Key(1));
    let before = fs::read(&probe).unwrap();
    tr.run_unit(Unit::Pwd(2)).unwrap();
    assert_eq!(fs::read(&probe).unwrap(), before);
    // pwd:2 touched only key 2.
    let touched: Vec<BundleKey> =
        tr.store().ledger().events().iter().filter(|e| e.phase == "pwd:2").map(|e| e.key).collect();
    assert_eq!(touched, [BundleKey::Key(2), BundleKey::Key(2)]);
}

#[test]
fn out_of_order_units_are_refused() {
    let tmp = TempDir::new().unwrap();
    let ds = common::tiny_dataset(&tmp.path().join("data"));
    let mut tr = Trainer::new(&ds, &tmp.path().join("store"), common::tiny_config()).unwrap();
    assert!(tr.run_unit(Unit::Kfa(0)).is_err());
    tr.run_unit(Unit::Gca).unwrap();
    assert!(tr.run_unit(Unit::Pwd(0)).is_err());
    tr.run_unit(Unit::Kfa(0)).unwrap();
    tr.run_unit(Unit::Pwd(0)).unwrap();
    assert!(tr.run_unit(Unit::Ifb(0)).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let t = trained();
    let tmp = TempDir::new().unwrap();
    let ds = morel::dataset::read_dataset(&t.data).unwrap();
    let dir = tmp.path().join("store");
    Trainer::new(&ds, &dir, common::tiny_config()).unwrap().run_until(Unit::Kfa(2)).unwrap();
    Trainer::new(&ds, &dir, common::tiny_config()).unwrap().run().unwrap();
    for k in [BundleKey::Global, BundleKey::Key(0), BundleKey::Key(1), BundleKey::Key(2), BundleKey::Key(3)] {
        let a = fs::read(dir.join(k.file_name())).unwrap();
        let b = fs::read(t.store.join(k.file_name())).unwrap();
        assert!(a == b, "{k} differs after resume");
    }
    let mut other = common::tiny_config();
    other.seed = 99;
    assert!(matches!(Trainer::new(&ds, &dir, other), Err(morel::Error::Config { .. })));
}
