mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn morel(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_morel")).args(args).env_remove("MOREL_THREADS").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(tmp: &TempDir) -> std::path::PathBuf {
    let data = tmp.path().join("data");
    common::tiny_dataset(&data);
    data
}

fn tiny_config(tmp: &TempDir) -> std::path::PathBuf {
    let cfg = tmp.path().join("train.cfg");
    common::write_config(&cfg, &common::tiny_config());
    cfg
}

#[test]
fn gen_writes_the_dataset_layout() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("scene.cfg");
    fs::write(&spec, morel::dataset::spec_to_text(&common::tiny_spec())).unwrap();
    let out = tmp.path().join("gen");
    let (code, _, err) = morel(&["gen", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.join("spec.cfg").is_file());
    assert!(out.join("oracle.morl").is_file());
    assert!(out.join("views/1/frame_00025.ppm").is_file());
    // Same seed, same bytes.
    let again = tmp.path().join("gen2");
    assert_eq!(morel(&["gen", "--spec", p(&spec), "--out", p(&again)]).0, 0);
    for f in ["oracle.morl", "views/0/frame_00010.ppm"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
    // --seed reaches the generator.
    let other = tmp.path().join("gen3");
    assert_eq!(morel(&["--seed", "5", "gen", "--spec", p(&spec), "--out", p(&other)]).0, 0);
    assert_ne!(fs::read(out.join("oracle.morl")).unwrap(), fs::read(other.join("oracle.morl")).unwrap());
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = TempDir::new().unwrap();
    let nowhere = tmp.path().join("nope");
    assert_eq!(morel(&["train", "--data", p(&nowhere), "--out", p(&tmp.path().join("s"))]).0, 3);
    assert_eq!(morel(&["render", "--store", p(&nowhere), "--t", "0..2", "--out", p(&tmp.path().join("r"))]).0, 3);
    assert_eq!(morel(&["eval", "--render", p(&nowhere), "--gt", p(&nowhere), "--out", p(&tmp.path().join("m.csv"))]).0, 3);
    assert_eq!(morel(&["inspect", "--store", p(&nowhere)]).0, 3);
    assert_eq!(morel(&["gen", "--spec", p(&nowhere), "--out", p(&tmp.path().join("g"))]).0, 3);
}

#[test]
fn malformed_config_exits_2_with_the_key() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "fhd.q1 = 0.6\nfhd.bogus_knob = 3\n").unwrap();
    let (code, _, err) = morel(&["train", "--data", p(&data), "--out", p(&tmp.path().join("s")), "--config", p(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("fhd.bogus_knob"), "{err}");
    fs::write(&cfg, "fhd.q1 = \"lots\"\n").unwrap();
    let (code, _, err) = morel(&["train", "--data", p(&data), "--out", p(&tmp.path().join("s2")), "--config", p(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("fhd.q1"), "{err}");
    let (code, _, err) =
        morel(&["train", "--data", p(&data), "--out", p(&tmp.path().join("s3")), "--set", "loss.lambda_ssim=oops"]);
    assert_eq!(code, 2);
    assert!(err.contains("loss.lambda_ssim"), "{err}");
    assert_eq!(morel(&["train", "--bogus-flag"]).0, 2);
}

#[test]
fn train_render_eval_inspect_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_data(&tmp);
    let cfg = tiny_config(&tmp);
    let store = tmp.path().join("store");
    let (code, out, err) = morel(&["train", "--data", p(&data), "--out", p(&store), "--config", p(&cfg), "--threads", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("peak key residency 2"), "{out}");

    let frames = tmp.path().join("frames");
    let (code, _, err) =
        morel(&["render", "--store", p(&store), "--view", "1", "--t", "0..26", "--out", p(&frames), "--gt", p(&data)]);
    assert_eq!(code, 0, "{err}");
    let manifest = fs::read_to_string(frames.join("manifest.txt")).unwrap();
    let m = morel::inference::Manifest::from_text(&manifest).unwrap();
    assert_eq!(m.entries.len(), 26);
    assert!(m.entries.iter().all(|e| e.resident.len() <= 2 && e.psnr.is_some()));

    let csv = tmp.path().join("metrics.csv");
    let (code, summary, err) = morel(&["eval", "--render", p(&frames), "--gt", p(&data), "--out", p(&csv)]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame,psnr,ssim"));
    assert_eq!(text.lines().count(), 27);
    assert!(summary.contains("tof"), "{summary}");
    assert!(tmp.path().join("profile.ppm").is_file());

    let png = tmp.path().join("png");
    assert_eq!(morel(&["render", "--store", p(&store), "--t", "3..=4", "--out", p(&png), "--format", "png"]).0, 0);
    assert!(png.join("frame_00004.png").is_file());

    // --t outside [0, T)
    assert_eq!(morel(&["render", "--store", p(&store), "--t", "20..27", "--out", p(&tmp.path().join("x"))]).0, 3);
    assert_eq!(morel(&["render", "--store", p(&store), "--t", "26", "--out", p(&tmp.path().join("x"))]).0, 3);

    let (code, text, _) = morel(&["inspect", "--store", p(&store)]);
    assert_eq!(code, 0);
    assert!(text.contains("gca.morl") && text.contains("kfa_0003.morl"));
    assert!(text.contains("key bundles 4"));
    assert!(text.contains("peak key residency 2"));

    // A finished store resumes as a no-op.
    let (code, _, err) = morel(&["train", "--data", p(&data), "--out", p(&store), "--config", p(&cfg)]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn inspect_after_global_stage_only() {
    let tmp = TempDir::new().unwrap();
    let ds = common::tiny_dataset(&tmp.path().join("data"));
    let store = tmp.path().join("store");
    let mut tr = morel::pipeline::Trainer::new(&ds, &store, common::tiny_config()).unwrap();
    tr.run_unit(morel::pipeline::Unit::Gca).unwrap();
    let (code, text, err) = morel(&["inspect", "--store", p(&store)]);
    assert_eq!(code, 0, "{err}");
    assert!(text.contains("gca.morl"));
    assert!(!text.contains("kfa_"));
    assert!(text.contains("key bundles 0"));
}
