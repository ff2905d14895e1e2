//! Generated datasets on disk: `views/<m>/frame_<t:05>.ppm`, `spec.cfg`, `oracle.morl`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use morel_core::scene::GaussianAttributes;
use morel_core::scenegen::{Actor, FrameSequence, GroundTruth, SceneSpec, Trajectory};

use crate::error::{io_err, Error, Result};
use crate::format::{decode, encode, Record, Section};
use crate::imageio::{read_frame, write_frame};

pub const SPEC_FILE: &str = "spec.cfg";
pub const ORACLE_FILE: &str = "oracle.morl";

pub fn frame_path(root: &Path, view: usize, t: usize) -> PathBuf {
    root.join("views").join(view.to_string()).join(format!("frame_{t:05}.ppm"))
}

fn cfg_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), reason: reason.into() }
}

fn fmt_vec(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

/// Scene description as TOML: top-level scalars, `statics.*`, and one `[[actor]]` table per actor.
pub fn spec_to_text(spec: &SceneSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", spec.seed);
    let _ = writeln!(s, "frames = {}", spec.frames);
    let _ = writeln!(s, "fps = {}", spec.fps);
    let _ = writeln!(s, "views = {}", spec.views);
    let _ = writeln!(s, "width = {}", spec.width);
    let _ = writeln!(s, "height = {}", spec.height);
    let _ = writeln!(s, "statics.count = {}", spec.static_count);
    let _ = writeln!(s, "statics.size_min = {:?}", spec.size_range.0);
    let _ = writeln!(s, "statics.size_max = {:?}", spec.size_range.1);
    let pal: Vec<String> = spec.palette.iter().map(|c| fmt_vec(c)).collect();
    let _ = writeln!(s, "statics.palette = [{}]", pal.join(", "));
    for a in &spec.actors {
        let _ = writeln!(s, "\n[[actor]]");
        match &a.trajectory {
            Trajectory::Linear { start, velocity } => {
                let _ = writeln!(s, "kind = \"linear\"\nstart = {}\nvelocity = {}", fmt_vec(start), fmt_vec(velocity));
            }
            Trajectory::Circular { center, radius, period, phase } => {
                let _ = writeln!(
                    s,
                    "kind = \"circular\"\ncenter = {}\nradius = {radius:?}\nperiod = {period:?}\nphase = {phase:?}",
                    fmt_vec(center)
                );
            }
            Trajectory::Piecewise { waypoints } => {
                let w: Vec<String> = waypoints.iter().map(|(t, p)| format!("[{t}, {:?}, {:?}]", p[0], p[1])).collect();
                let _ = writeln!(s, "kind = \"piecewise\"\nwaypoints = [{}]", w.join(", "));
            }
        }
        let _ = writeln!(s, "color = {}\nsigma = {}\nopacity = {:?}", fmt_vec(&a.color), fmt_vec(&a.sigma), a.opacity);
        let _ = writeln!(s, "appear = {}", a.appear);
        if let Some(d) = a.disappear {
            let _ = writeln!(s, "disappear = {d}");
        }
    }
    s
}

fn num(v: &toml::Value, key: &str) -> Result<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).ok_or_else(|| cfg_err(key, "expected a number"))
}

fn count(v: &toml::Value, key: &str) -> Result<usize> {
    v.as_integer().and_then(|i| usize::try_from(i).ok()).ok_or_else(|| cfg_err(key, "expected a non-negative integer"))
}

fn vecn<const N: usize>(v: &toml::Value, key: &str) -> Result<[f64; N]> {
    let a = v.as_array().filter(|a| a.len() == N).ok_or_else(|| cfg_err(key, format!("expected {N} numbers")))?;
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(a) {
        *o = num(x, key)?;
    }
    Ok(out)
}

fn parse_actor(i: usize, t: &toml::Table) -> Result<Actor> {
    let key = |k: &str| format!("actor.{i}.{k}");
    let get = |k: &str| t.get(k).ok_or_else(|| cfg_err(&key(k), "missing"));
    for k in t.keys() {
        const KNOWN: &[&str] = &[
            "kind", "start", "velocity", "center", "radius", "period", "phase", "waypoints", "color", "sigma", "opacity",
            "appear", "disappear",
        ];
        if !KNOWN.contains(&k.as_str()) {
            return Err(cfg_err(&key(k), "unknown key"));
        }
    }
    let trajectory = match get("kind")?.as_str() {
        Some("linear") => Trajectory::Linear {
            start: vecn(get("start")?, &key("start"))?,
            velocity: vecn(get("velocity")?, &key("velocity"))?,
        },
        Some("circular") => Trajectory::Circular {
            center: vecn(get("center")?, &key("center"))?,
            radius: num(get("radius")?, &key("radius"))?,
            period: num(get("period")?, &key("period"))?,
            phase: t.get("phase").map(|v| num(v, &key("phase"))).transpose()?.unwrap_or(0.0),
        },
        Some("piecewise") => {
            let arr = get("waypoints")?.as_array().ok_or_else(|| cfg_err(&key("waypoints"), "expected an array"))?;
            let mut waypoints = Vec::new();
            for w in arr {
                let [t, x, y] = vecn::<3>(w, &key("waypoints"))?;
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(cfg_err(&key("waypoints"), "frame must be a non-negative integer"));
                }
                waypoints.push((t as usize, [x, y]));
            }
            Trajectory::Piecewise { waypoints }
        }
        _ => return Err(cfg_err(&key("kind"), "expected linear, circular or piecewise")),
    };
    Ok(Actor {
        trajectory,
        color: vecn(get("color")?, &key("color"))?,
        sigma: vecn(get("sigma")?, &key("sigma"))?,
        opacity: num(get("opacity")?, &key("opacity"))?,
        appear: t.get("appear").map(|v| count(v, &key("appear"))).transpose()?.unwrap_or(0),
        disappear: t.get("disappear").map(|v| count(v, &key("disappear"))).transpose()?,
    })
}

/// Parses a scene description on top of the defaults; an `[[actor]]` list replaces the default actors.
pub fn spec_from_text(text: &str) -> Result<SceneSpec> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err("<syntax>", e.message()))?;
    let mut spec = SceneSpec::default();
    for (k, v) in &table {
        match k.as_str() {
            "seed" => spec.seed = v.as_integer().and_then(|i| u64::try_from(i).ok()).ok_or_else(|| cfg_err(k, "expected an integer"))?,
            "frames" => spec.frames = count(v, k)?,
            "fps" => spec.fps = count(v, k)?,
            "views" => spec.views = count(v, k)?,
            "width" => spec.width = count(v, k)?,
            "height" => spec.height = count(v, k)?,
            "statics" => {
                let t = v.as_table().ok_or_else(|| cfg_err(k, "expected a table"))?;
                for (sk, sv) in t {
                    let key = format!("statics.{sk}");
                    match sk.as_str() {
                        "count" => spec.static_count = count(sv, &key)?,
                        "size_min" => spec.size_range.0 = num(sv, &key)?,
                        "size_max" => spec.size_range.1 = num(sv, &key)?,
                        "palette" => {
                            let a = sv.as_array().ok_or_else(|| cfg_err(&key, "expected an array"))?;
                            spec.palette = a.iter().map(|c| vecn::<3>(c, &key)).collect::<Result<_>>()?;
                        }
                        _ => return Err(cfg_err(&key, "unknown key")),
                    }
                }
            }
            "actor" => {
                let a = v.as_array().ok_or_else(|| cfg_err(k, "expected [[actor]] tables"))?;
                spec.actors = a
                    .iter()
                    .enumerate()
                    .map(|(i, t)| parse_actor(i, t.as_table().ok_or_else(|| cfg_err(k, "expected a table"))?))
                    .collect::<Result<_>>()?;
            }
            _ => return Err(cfg_err(k, "unknown key")),
        }
    }
    spec.validate().map_err(|e| cfg_err("spec", e.to_string()))?;
    Ok(spec)
}

const ORACLE_COLS: usize = 10;

pub fn oracle_to_record(oracle: &[Vec<GaussianAttributes>]) -> Record {
    let sections = oracle
        .iter()
        .enumerate()
        .map(|(t, gs)| {
            let data = gs
                .iter()
                .flat_map(|g| {
                    [g.center[0], g.center[1], g.cov[0], g.cov[1], g.cov[2], g.color[0], g.color[1], g.color[2], g.opacity, g.depth_key]
                })
                .collect();
            Section::f64(format!("frame.{t:05}"), &[gs.len(), ORACLE_COLS], data)
        })
        .collect();
    Record { sections }
}

pub fn oracle_from_record(rec: &Record) -> std::result::Result<Vec<Vec<GaussianAttributes>>, String> {
    let mut out = Vec::with_capacity(rec.sections.len());
    for (t, s) in rec.sections.iter().enumerate() {
        if s.name != format!("frame.{t:05}") {
            return Err(format!("unexpected section {}", s.name));
        }
        let crate::format::Data::F64(d) = &s.data else { return Err(format!("{}: expected f64", s.name)) };
        if d.len() % ORACLE_COLS != 0 {
            return Err(format!("{}: ragged rows", s.name));
        }
        out.push(
            d.chunks_exact(ORACLE_COLS)
                .map(|r| GaussianAttributes {
                    center: [r[0], r[1]],
                    cov: [r[2], r[3], r[4]],
                    color: [r[5], r[6], r[7]],
                    opacity: r[8],
                    depth_key: r[9],
                })
                .collect(),
        );
    }
    Ok(out)
}

pub fn write_dataset(root: &Path, spec: &SceneSpec, gt: &GroundTruth) -> Result<()> {
    for (v, frames) in gt.sequence.frames.iter().enumerate() {
        let dir = root.join("views").join(v.to_string());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (t, f) in frames.iter().enumerate() {
            write_frame(&frame_path(root, v, t), f)?;
        }
    }
    let p = root.join(SPEC_FILE);
    fs::write(&p, spec_to_text(spec)).map_err(io_err(&p))?;
    let p = root.join(ORACLE_FILE);
    fs::write(&p, encode(&oracle_to_record(&gt.oracle))).map_err(io_err(&p))?;
    Ok(())
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub sequence: FrameSequence,
    pub oracle: Vec<Vec<GaussianAttributes>>,
}

pub fn read_spec(root: &Path) -> Result<SceneSpec> {
    let p = root.join(SPEC_FILE);
    if !p.is_file() {
        return Err(Error::NotFound(p.display().to_string()));
    }
    spec_from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let spec = read_spec(root)?;
    let mut frames = Vec::with_capacity(spec.views);
    for v in 0..spec.views {
        let mut seq = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let f = read_frame(&frame_path(root, v, t))?;
            if (f.width, f.height) != (spec.width, spec.height) {
                return Err(Error::Image { path: frame_path(root, v, t), reason: "resolution differs from spec".into() });
            }
            seq.push(f);
        }
        frames.push(seq);
    }
    let p = root.join(ORACLE_FILE);
    let bytes = fs::read(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(p.display().to_string()),
        _ => io_err(&p)(e),
    })?;
    let corrupt = |reason: String| Error::CorruptRecord { name: ORACLE_FILE.into(), reason };
    let oracle = oracle_from_record(&decode(&bytes).map_err(|e| corrupt(e.to_string()))?).map_err(corrupt)?;
    if oracle.len() != spec.frames {
        return Err(corrupt(format!("{} frames, spec says {}", oracle.len(), spec.frames)));
    }
    let sequence = FrameSequence { views: spec.view_transforms(), frames, fps: spec.fps };
    Ok(Dataset { spec, sequence, oracle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_text_roundtrip() {
        let spec = SceneSpec::default();
        assert_eq!(spec_from_text(&spec_to_text(&spec)).unwrap(), spec);
    }

    #[test]
    fn unknown_spec_key_is_named() {
        match spec_from_text("statics.colour = 3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "statics.colour"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { frames: 3, views: 2, width: 20, height: 16, static_count: 4, ..SceneSpec::default() };
        let gt = morel_core::scenegen::generate(&spec).unwrap();
        write_dataset(dir.path(), &spec, &gt).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.spec, spec);
        assert_eq!(ds.sequence.frames, gt.sequence.frames);
        assert_eq!(ds.oracle, gt.oracle);
        assert!(frame_path(dir.path(), 1, 2).ends_with("views/1/frame_00002.ppm"));
    }
}
