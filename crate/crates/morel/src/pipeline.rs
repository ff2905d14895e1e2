//! Four-stage training over a store: global space, key spaces, windowed
//! deformation, then blending. Every stage unit is checkpointed to the store.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use morel_core::fhd::{assign_levels, level_counts};
use morel_core::model::Bundle;
use morel_core::scene::{init_anchor_space, AnchorSpace};
use morel_core::scenegen::{sample_point_cloud, voxel_decimate};
use morel_core::schedule::TrainPlan;
use morel_core::train::{blend_window, train_gca, train_ifb, train_kfa, train_pwd, TrainEvent};

use crate::config::PipelineConfig;
use crate::dataset::{spec_to_text, Dataset};
use crate::error::{io_err, Error, Result};
use crate::store::{BundleKey, Store};

pub const STORE_CFG: &str = "store.cfg";
pub const SCENE_CFG: &str = "scene.cfg";
pub const PROGRESS_FILE: &str = "progress.txt";
pub const TRAIN_LOG: &str = "train.log";

/// Training configuration plus the sequence length it was trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreMeta {
    pub config: PipelineConfig,
    pub frames: usize,
}

impl StoreMeta {
    pub fn plan(&self) -> Result<TrainPlan> {
        let c = &self.config;
        Ok(TrainPlan::new(self.frames, c.gop, c.eps, c.iters, c.seed)?)
    }

    pub fn to_text(&self) -> String {
        format!("data.frames = {}\n{}", self.frames, self.config.to_text())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut frames = None;
        let mut rest = String::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "data.frames" => {
                    frames = Some(v.trim().parse().map_err(|_| Error::Config {
                        key: "data.frames".into(),
                        reason: format!("`{}` is not a frame count", v.trim()),
                    })?)
                }
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        let frames = frames.ok_or_else(|| Error::Config { key: "data.frames".into(), reason: "missing".into() })?;
        Ok(StoreMeta { config: PipelineConfig::from_text(&rest)?, frames })
    }
}

pub fn read_store_meta(dir: &Path) -> Result<StoreMeta> {
    let p = dir.join(STORE_CFG);
    if !p.is_file() {
        return Err(Error::NotFound(p.display().to_string()));
    }
    StoreMeta::from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)
}

/// Initial global space from a point cloud sampled across the whole sequence.
pub fn initial_space(ds: &Dataset, cfg: &PipelineConfig) -> Result<AnchorSpace> {
    let frames_at: Vec<usize> = (0..ds.spec.frames).step_by(cfg.init.frame_stride).collect();
    let pts = sample_point_cloud(&ds.oracle, &frames_at, cfg.init.points_per_frame, cfg.seed)?;
    let (pts, _) = voxel_decimate(&pts, cfg.init.decimate_voxel, cfg.init.max_points)?;
    Ok(init_anchor_space(&pts, cfg.grid_voxel, cfg.seed ^ 0x5eed, cfg.shape)?)
}

/// Stage units in execution order.
pub fn units(plan: &TrainPlan) -> Result<Vec<Unit>> {
    let n = plan.keys();
    let mut out = vec![Unit::Gca];
    out.extend((0..n).map(Unit::Kfa));
    out.extend((0..n).map(Unit::Pwd));
    for k in 0..n {
        if blend_window(plan, k)?.is_some() {
            out.push(Unit::Ifb(k));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Unit {
    Gca,
    Kfa(usize),
    Pwd(usize),
    Ifb(usize),
}

impl Unit {
    pub fn label(self, plan: &TrainPlan) -> String {
        match self {
            Unit::Gca => "gca".into(),
            Unit::Kfa(n) => format!("kfa {n}"),
            Unit::Pwd(n) => format!("pwd {n}"),
            Unit::Ifb(n) if n + 1 < plan.keys() => format!("ifb {n}"),
            Unit::Ifb(n) => format!("ifb-tail {n}"),
        }
    }
}

pub struct Trainer<'d> {
    ds: &'d Dataset,
    cfg: PipelineConfig,
    plan: TrainPlan,
    store: Store,
    done: BTreeSet<String>,
    log: BufWriter<fs::File>,
    step: u64,
    quiet: bool,
}

impl<'d> Trainer<'d> {
    /// Opens `out` for training. An existing store resumes if it was started with
    /// the same configuration and data length; otherwise this fails on `store.cfg`.
    pub fn new(ds: &'d Dataset, out: &Path, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let meta = StoreMeta { config: cfg, frames: ds.spec.frames };
        let plan = meta.plan()?;
        let store = Store::open(out)?.with_event_log();
        let meta_path = out.join(STORE_CFG);
        let mut done = BTreeSet::new();
        if meta_path.is_file() {
            let old = read_store_meta(out)?;
            if old != meta {
                return Err(Error::Config {
                    key: STORE_CFG.into(),
                    reason: "store was trained with a different configuration; use a fresh directory".into(),
                });
            }
            let p = out.join(PROGRESS_FILE);
            if p.is_file() {
                done = fs::read_to_string(&p).map_err(io_err(&p))?.lines().map(str::to_string).collect();
            }
        } else {
            fs::write(&meta_path, meta.to_text()).map_err(io_err(&meta_path))?;
            let p = out.join(SCENE_CFG);
            fs::write(&p, spec_to_text(&ds.spec)).map_err(io_err(&p))?;
        }
        let log_path = out.join(TRAIN_LOG);
        let log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        Ok(Trainer { ds, cfg, plan, store, done, log: BufWriter::new(log), step: 0, quiet: true })
    }

    /// Mirrors log lines to stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.quiet = !on;
        self
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn is_done(&self, unit: Unit) -> bool {
        self.done.contains(&unit.label(&self.plan))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if !self.quiet {
            eprintln!("{s}");
        }
        let p = self.store.dir().join(TRAIN_LOG);
        writeln!(self.log, "{s}").map_err(io_err(&p))
    }

    fn mark_done(&mut self, label: String) -> Result<()> {
        self.log.flush().map_err(io_err(self.store.dir().join(TRAIN_LOG)))?;
        let p = self.store.dir().join(PROGRESS_FILE);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
        writeln!(f, "{label}").map_err(io_err(&p))?;
        self.done.insert(label);
        Ok(())
    }

    /// Runs every remaining unit.
    pub fn run(&mut self) -> Result<()> {
        for u in units(&self.plan)? {
            self.run_unit(u)?;
        }
        Ok(())
    }

    /// Runs the units up to and including `last`, skipping finished ones.
    pub fn run_until(&mut self, last: Unit) -> Result<()> {
        for u in units(&self.plan)? {
            if u > last {
                break;
            }
            self.run_unit(u)?;
        }
        Ok(())
    }

    pub fn run_unit(&mut self, unit: Unit) -> Result<()> {
        let label = unit.label(&self.plan);
        if self.done.contains(&label) {
            return Ok(());
        }
        self.check_order(unit)?;
        self.store.set_phase(label.replace(' ', ":"));
        self.line(&format!("begin {label}"))?;
        let summary = match unit {
            Unit::Gca => self.gca()?,
            Unit::Kfa(n) => self.kfa(n)?,
            Unit::Pwd(n) => self.pwd(n)?,
            Unit::Ifb(n) => self.ifb(n)?,
        };
        self.line(&format!("end {label} {summary}"))?;
        self.store.set_phase("idle");
        self.mark_done(label)
    }

    fn check_order(&self, unit: Unit) -> Result<()> {
        let need: Vec<Unit> = match unit {
            Unit::Gca => vec![],
            Unit::Kfa(_) => vec![Unit::Gca],
            Unit::Pwd(n) => vec![Unit::Kfa(n)],
            Unit::Ifb(n) if n + 1 < self.plan.keys() => vec![Unit::Pwd(n), Unit::Pwd(n + 1)],
            Unit::Ifb(n) => vec![Unit::Pwd(n)],
        };
        for u in need {
            if !self.is_done(u) {
                return Err(Error::Core(morel_core::Error::PreconditionViolation(format!(
                    "{} must finish before {}",
                    u.label(&self.plan),
                    unit.label(&self.plan)
                ))));
            }
        }
        Ok(())
    }

    fn train_with_log(
        &mut self,
        f: impl FnOnce(&mut dyn FnMut(TrainEvent), &Dataset, &PipelineConfig, &TrainPlan) -> morel_core::Result<()>,
    ) -> Result<()> {
        let every = self.cfg.log_every.max(1);
        let keys = self.store.ledger().key_count();
        let mut lines = Vec::new();
        let mut step = self.step;
        let mut sink = |e: TrainEvent| match e {
            TrainEvent::Step { stage, n, j, t, view, loss, psnr } => {
                step += 1;
                if j % every == 0 {
                    lines.push(format!(
                        "step={step} stage={} n={n} j={j} t={t} view={view} loss={loss:.6} psnr={psnr:.3} keys={keys}",
                        stage.name()
                    ));
                }
            }
            TrainEvent::Densify { stage, n, j, report } => lines.push(format!(
                "densify stage={} n={n} j={j} grown={} pruned={} total={} keys={keys}",
                stage.name(),
                report.grown,
                report.pruned,
                report.total
            )),
        };
        let result = f(&mut sink, self.ds, &self.cfg, &self.plan);
        self.step = step;
        for l in lines {
            self.line(&l)?;
        }
        Ok(result?)
    }

    fn gca(&mut self) -> Result<String> {
        let mut global = Bundle::new(initial_space(self.ds, &self.cfg)?);
        self.store.adopt(BundleKey::Global)?;
        let initial = global.space.len();
        self.train_with_log(|sink, ds, cfg, plan| train_gca(&mut global, &ds.sequence, plan, &cfg.train, sink))?;
        let d = &self.cfg.train.densify;
        let th = assign_levels(&mut global.space, d.q1, d.q2)?;
        let lc = level_counts(&global.space);
        self.store.save(BundleKey::Global, &global)?;
        self.store.unload(BundleKey::Global)?;
        Ok(format!(
            "anchors={}->{} levels={}/{}/{} tau1={:.6e} tau2={:.6e}",
            initial,
            global.space.len(),
            lc[0],
            lc[1],
            lc[2],
            th.tau1,
            th.tau2
        ))
    }

    fn kfa(&mut self, n: usize) -> Result<String> {
        let global = self.store.load(BundleKey::Global)?;
        let mut key = Bundle::new(global.space.derive_keyframe_space(n, self.plan.gop)?);
        drop(global);
        self.store.unload(BundleKey::Global)?;
        self.store.adopt(BundleKey::Key(n))?;
        self.train_with_log(|sink, ds, cfg, plan| train_kfa(&mut key, n, &ds.sequence, plan, &cfg.train, sink))?;
        self.store.save(BundleKey::Key(n), &key)?;
        self.store.unload(BundleKey::Key(n))?;
        Ok(format!("anchors={}", key.space.len()))
    }

    fn pwd(&mut self, n: usize) -> Result<String> {
        let mut key = self.store.load(BundleKey::Key(n))?;
        let before = key.space.len();
        self.train_with_log(|sink, ds, cfg, plan| train_pwd(&mut key, n, &ds.sequence, plan, &cfg.train, sink))?;
        self.store.save(BundleKey::Key(n), &key)?;
        self.store.unload(BundleKey::Key(n))?;
        Ok(format!("anchors={}->{}", before, key.space.len()))
    }

    fn ifb(&mut self, n: usize) -> Result<String> {
        let mut own = self.store.load(BundleKey::Key(n))?;
        let has_next = n + 1 < self.plan.keys();
        let mut next = if has_next { Some(self.store.load(BundleKey::Key(n + 1))?) } else { None };
        self.train_with_log(|sink, ds, cfg, plan| {
            train_ifb(&mut own, next.as_mut(), n, &ds.sequence, plan, &cfg.train, sink)
        })?;
        self.store.save(BundleKey::Key(n), &own)?;
        self.store.unload(BundleKey::Key(n))?;
        if let Some(b) = &next {
            self.store.save(BundleKey::Key(n + 1), b)?;
            self.store.unload(BundleKey::Key(n + 1))?;
        }
        Ok(format!("pair={}", if has_next { 2 } else { 1 }))
    }
}

/// Convenience wrapper: trains every stage into `out`.
pub fn train(ds: &Dataset, out: &Path, cfg: PipelineConfig) -> Result<PathBuf> {
    Trainer::new(ds, out, cfg)?.run()?;
    Ok(out.to_path_buf())
}
