//! On-demand rendering: keeps exactly the bundle pair the current chunk needs.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use morel_core::blend::{blend_frame, hard_switch_frame};
use morel_core::image::{Frame8, Image};
use morel_core::metrics::psnr;
use morel_core::model::{Bundle, FrameConfig};
use morel_core::render::ViewTransform;
use morel_core::schedule::TrainPlan;

use crate::dataset::{spec_from_text, Dataset};
use crate::error::{io_err, Error, Result};
use crate::imageio::write_frame;
use crate::pipeline::{read_store_meta, SCENE_CFG};
use crate::store::{BundleKey, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Machinery {
    /// Two adjacent key bundles blended over the chunk.
    Blend,
    /// The chunk's own key bundle alone at full opacity, switching hard at boundaries.
    HardSwitch,
}

pub struct FrameRenderer {
    store: Store,
    plan: TrainPlan,
    frame: FrameConfig,
    views: Vec<ViewTransform>,
    mode: Machinery,
    /// Chunk whose bundles are resident, with the bundles.
    current: Option<(usize, Bundle, Option<Bundle>)>,
}

impl FrameRenderer {
    pub fn open(dir: &Path, mode: Machinery) -> Result<Self> {
        let store = Store::open_existing(dir)?;
        let meta = read_store_meta(dir)?;
        let p = dir.join(SCENE_CFG);
        if !p.is_file() {
            return Err(Error::NotFound(p.display().to_string()));
        }
        let spec = spec_from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
        Ok(FrameRenderer {
            store,
            plan: meta.plan()?,
            frame: meta.config.train.frame,
            views: spec.view_transforms(),
            mode,
            current: None,
        })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn views(&self) -> &[ViewTransform] {
        &self.views
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Chunk that renders frame `t`: boundary frames belong to the later chunk.
    pub fn chunk_of(&self, t: usize) -> Result<usize> {
        Ok(self.plan.required_anchors(t)?.0)
    }

    fn partner(&self, n: usize) -> Option<usize> {
        (self.mode == Machinery::Blend && n + 1 < self.plan.keys()).then_some(n + 1)
    }

    /// Makes chunk `n`'s bundles resident, unloading the previous pair first.
    fn ensure_chunk(&mut self, n: usize) -> Result<()> {
        if self.current.as_ref().is_some_and(|c| c.0 == n) {
            return Ok(());
        }
        self.release()?;
        self.store.set_phase(format!("render:{n}"));
        let own = self.store.load(BundleKey::Key(n))?;
        let next = match self.partner(n) {
            Some(m) => Some(self.store.load(BundleKey::Key(m))?),
            None => None,
        };
        self.current = Some((n, own, next));
        Ok(())
    }

    /// Unloads whatever is resident.
    pub fn release(&mut self) -> Result<()> {
        if let Some((n, _, next)) = self.current.take() {
            self.store.unload(BundleKey::Key(n))?;
            if next.is_some() {
                self.store.unload(BundleKey::Key(n + 1))?;
            }
        }
        Ok(())
    }

    pub fn resident_keys(&self) -> Vec<usize> {
        self.store
            .ledger()
            .resident()
            .iter()
            .filter_map(|k| match k {
                BundleKey::Key(n) => Some(*n),
                BundleKey::Global => None,
            })
            .collect()
    }

    fn view(&self, view: usize) -> Result<ViewTransform> {
        self.views.get(view).copied().ok_or_else(|| {
            Error::Core(morel_core::Error::InvalidInput(format!("view {view} of {}", self.views.len())))
        })
    }

    /// Renders frame `t` through its own chunk.
    pub fn render(&mut self, t: usize, view: usize) -> Result<Image> {
        let n = self.chunk_of(t)?;
        self.render_in_chunk(n, t, view)
    }

    /// Renders frame `t` through chunk `n`; `t` must lie in that chunk's range,
    /// which includes the next chunk's first frame.
    pub fn render_in_chunk(&mut self, n: usize, t: usize, view: usize) -> Result<Image> {
        let v = self.view(view)?;
        if n >= self.plan.keys() {
            return Err(Error::Core(morel_core::Error::InvalidInput(format!("chunk {n} of {}", self.plan.keys()))));
        }
        self.ensure_chunk(n)?;
        let (_, own, next) = self.current.as_ref().unwrap();
        let img = match self.mode {
            Machinery::Blend => blend_frame(&self.plan, n, t, own, next.as_ref(), &v, &self.frame)?,
            Machinery::HardSwitch => hard_switch_frame(&self.plan, n, t, own, &v, &self.frame)?,
        };
        Ok(img)
    }
}

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: String,
    pub psnr: Option<f64>,
    pub resident: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub view: usize,
    pub entries: Vec<ManifestEntry>,
}

fn fmt_psnr(p: Option<f64>) -> String {
    match p {
        None => "-".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.4}"),
    }
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# view {}\n# index file psnr resident\n", self.view);
        for e in &self.entries {
            let r: Vec<String> = e.resident.iter().map(|n| n.to_string()).collect();
            let r = if r.is_empty() { "-".to_string() } else { r.join(",") };
            let _ = writeln!(s, "{} {} {} {}", e.index, e.file, fmt_psnr(e.psnr), r);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Config { key: MANIFEST.into(), reason };
        let mut view = None;
        let mut entries = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# view ") {
                view = Some(rest.trim().parse().map_err(|_| bad(format!("bad view line `{line}`")))?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad(format!("bad line `{line}`")));
            }
            let psnr = match f[2] {
                "-" => None,
                "inf" => Some(f64::INFINITY),
                v => Some(v.parse().map_err(|_| bad(format!("bad psnr `{v}`")))?),
            };
            let resident = if f[3] == "-" {
                vec![]
            } else {
                f[3].split(',').map(|x| x.parse().map_err(|_| bad(format!("bad residency `{}`", f[3])))).collect::<Result<_>>()?
            };
            entries.push(ManifestEntry {
                index: f[0].parse().map_err(|_| bad(format!("bad index `{}`", f[0])))?,
                file: f[1].to_string(),
                psnr,
                resident,
            });
        }
        Ok(Manifest { view: view.ok_or_else(|| bad("missing view line".into()))?, entries })
    }
}

/// Renders `range` of `view` into `out` as `frame_<t:05>.<ext>` plus a manifest.
pub fn render_sequence(
    r: &mut FrameRenderer,
    range: Range<usize>,
    view: usize,
    out: &Path,
    gt: Option<&Dataset>,
    ext: &str,
) -> Result<Manifest> {
    let frames = r.plan().frames;
    if range.end > frames || range.start > range.end {
        return Err(Error::Core(morel_core::Error::InvalidInput(format!(
            "frame range {}..{} outside 0..{frames}",
            range.start, range.end
        ))));
    }
    r.view(view)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::with_capacity(range.len());
    for t in range {
        let img = r.render(t, view)?;
        let frame = Frame8::from_image(&img);
        let file = format!("frame_{t:05}.{ext}");
        write_frame(&out.join(&file), &frame)?;
        let psnr = gt.map(|d| psnr(&frame.to_image(), &d.sequence.image(view, t)));
        entries.push(ManifestEntry { index: t, file, psnr, resident: r.resident_keys() });
    }
    r.release()?;
    let m = Manifest { view, entries };
    let p = out.join(MANIFEST);
    fs::write(&p, m.to_text()).map_err(io_err(&p))?;
    Ok(m)
}
