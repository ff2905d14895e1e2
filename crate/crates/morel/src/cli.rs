//! Command-line front end. Exit codes: 0 success, 1 failure, 2 bad configuration
//! or usage, 3 missing input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use morel_core::fhd::level_counts;
use morel_core::scenegen::{generate, SceneSpec};

use crate::config::PipelineConfig;
use crate::dataset::{read_dataset, read_spec, spec_from_text, write_dataset};
use crate::error::{io_err, Error, Result};
use crate::eval::evaluate_dirs;
use crate::inference::{render_sequence, FrameRenderer, Machinery};
use crate::pipeline::{read_store_meta, Trainer, PROGRESS_FILE};
use crate::store::{BundleKey, Store, RESIDENCY_LOG};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "morel", version, about = "Long-range dynamic Gaussian splatting with key-frame anchor relays")]
pub struct Cli {
    /// Seed for every random choice; overrides the seed in spec and config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to MOREL_THREADS, then all cores).
    #[arg(long, global = true, env = "MOREL_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrameFormat {
    Ppm,
    Png,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    Gen {
        /// Scene description; the built-in scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all stages into a store (resumes an interrupted run).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gop: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(short, long)]
        verbose: bool,
    },
    /// Render a frame range of one view with on-demand bundle loading.
    Render {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Frame range `a..b` (half-open) or `a..=b`.
        #[arg(long = "t")]
        range: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory, for per-frame PSNR in the manifest.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ppm")]
        format: FrameFormat,
        /// Render each chunk from its own key bundle without blending.
        #[arg(long)]
        hard_switch: bool,
    },
    /// Compare a render directory with ground truth.
    Eval {
        #[arg(long)]
        render: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a store.
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
}

pub fn parse_range(s: &str) -> Option<Range<usize>> {
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        return Some(a..b.checked_add(1)?);
    }
    if let Some((a, b)) = s.split_once("..") {
        return Some(a.trim().parse().ok()?..b.trim().parse().ok()?);
    }
    let t: usize = s.trim().parse().ok()?;
    Some(t..t + 1)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NotFound(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    set_threads(cli.threads);
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(feature = "parallel")]
fn set_threads(n: Option<usize>) {
    if let Some(n) = n.filter(|&n| n > 0) {
        // a pool that is already configured keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn set_threads(_: Option<usize>) {}

fn missing(p: &Path) -> Error {
    Error::NotFound(p.display().to_string())
}

/// Runs a parsed command and returns what it would print on success.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.cmd {
        Command::Gen { spec, out } => {
            let mut s = match spec {
                Some(p) if !p.is_file() => return Err(missing(p)),
                Some(p) => spec_from_text(&fs::read_to_string(p).map_err(io_err(p))?)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let gt = generate(&s)?;
            write_dataset(out, &s, &gt)?;
            Ok(format!("wrote {} views x {} frames to {}\n", s.views, s.frames, out.display()))
        }
        Command::Train { data, out, gop, config, overrides, verbose } => {
            if !data.is_dir() {
                return Err(missing(data));
            }
            let mut cfg = PipelineConfig::default();
            if let Some(p) = config {
                if !p.is_file() {
                    return Err(missing(p));
                }
                cfg.apply_text(&fs::read_to_string(p).map_err(io_err(p))?)?;
            }
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Config { key: o.clone(), reason: "expected key=value".into() })?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(g) = gop {
                cfg.set("plan.gop", &g.to_string())?;
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let ds = read_dataset(data)?;
            let mut tr = Trainer::new(&ds, out, cfg)?.verbose(*verbose);
            tr.run()?;
            let l = tr.store().ledger();
            Ok(format!(
                "trained {} key bundles into {} (peak key residency {})\n",
                tr.plan().keys(),
                out.display(),
                l.peak_keys()
            ))
        }
        Command::Render { store, view, range, out, gt, format, hard_switch } => {
            let mode = if *hard_switch { Machinery::HardSwitch } else { Machinery::Blend };
            let mut r = FrameRenderer::open(store, mode)?;
            let frames = r.plan().frames;
            let range = parse_range(range)
                .filter(|r| r.start < r.end && r.end <= frames)
                .ok_or_else(|| Error::NotFound(format!("frames {range} (sequence has 0..{frames})")))?;
            if *view >= r.views().len() {
                return Err(Error::NotFound(format!("view {view} (store has {})", r.views().len())));
            }
            let ds = match gt {
                Some(p) if !p.is_dir() => return Err(missing(p)),
                Some(p) => Some(read_dataset(p)?),
                None => None,
            };
            let ext = match format {
                FrameFormat::Ppm => "ppm",
                FrameFormat::Png => "png",
            };
            let m = render_sequence(&mut r, range, *view, out, ds.as_ref(), ext)?;
            let l = r.store().ledger();
            Ok(format!(
                "rendered {} frames to {} (loads {}, peak key residency {})\n",
                m.entries.len(),
                out.display(),
                l.loads(),
                l.peak_keys()
            ))
        }
        Command::Eval { render, gt, out } => {
            for p in [render, gt] {
                if !p.is_dir() {
                    return Err(missing(p));
                }
            }
            read_spec(gt)?;
            let s = evaluate_dirs(render, gt, out)?;
            Ok(s.summary_text())
        }
        Command::Inspect { store } => inspect(store),
    }
}

pub fn inspect(dir: &Path) -> Result<String> {
    let store = Store::open_existing(dir)?;
    let meta = read_store_meta(dir)?;
    let mut s = String::new();
    let plan = meta.plan()?;
    let _ = writeln!(s, "store {}", dir.display());
    let _ = writeln!(s, "frames {} gop {} keys {} seed {}", plan.frames, plan.gop, plan.keys(), plan.seed);
    let mut keys = vec![BundleKey::Global];
    keys.extend(store.key_bundles()?.into_iter().map(BundleKey::Key));
    let _ = writeln!(s, "{:<16} {:>10} {:>8} {:>6} {:>6} {:>6} {:>6}", "file", "bytes", "anchors", "L0", "L1", "L2", "field");
    let mut key_count = 0;
    for k in keys {
        if !store.exists(k) {
            continue;
        }
        key_count += k.is_key() as usize;
        let bytes = fs::metadata(store.path_of(k)).map_err(io_err(store.path_of(k)))?.len();
        let b = store.peek(k)?;
        let lc = level_counts(&b.space);
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>8} {:>6} {:>6} {:>6} {:>6}",
            k.file_name(),
            bytes,
            b.space.len(),
            lc[0],
            lc[1],
            lc[2],
            if b.field.is_some() { "yes" } else { "no" }
        );
    }
    let _ = writeln!(s, "key bundles {key_count}");
    let p = dir.join(PROGRESS_FILE);
    if p.is_file() {
        let done = fs::read_to_string(&p).map_err(io_err(&p))?;
        let _ = writeln!(s, "completed units: {}", done.lines().collect::<Vec<_>>().join(", "));
    }
    let p = dir.join(RESIDENCY_LOG);
    if p.is_file() {
        let log = fs::read_to_string(&p).map_err(io_err(&p))?;
        let peak = log
            .lines()
            .filter_map(|l| l.rsplit_once("keys=").and_then(|(_, v)| v.parse::<usize>().ok()))
            .max()
            .unwrap_or(0);
        let _ = writeln!(s, "residency events {} peak key residency {peak}", log.lines().count());
        for l in log.lines() {
            let _ = writeln!(s, "  {l}");
        }
    }
    Ok(s)
}
