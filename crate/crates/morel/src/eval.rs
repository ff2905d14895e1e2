//! Per-frame and sequence metrics for a rendered directory against ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use morel_core::image::Image;
use morel_core::metrics::{
    ofps_from_flows, psnr, sequence_flows, ssim, temporal_profile, tof_from_flows,
};

use crate::dataset::{frame_path, read_spec};
use crate::error::{io_err, Error, Result};
use crate::imageio::{read_frame, write_image};
use crate::inference::{Manifest, MANIFEST};

pub const OFPS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub view: usize,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub tof: Option<f64>,
    pub ofps: Option<f64>,
    pub ofps_gt: Option<f64>,
    pub profile_row: usize,
}

impl EvalSummary {
    pub fn csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for f in &self.frames {
            let p = if f.psnr.is_infinite() { "inf".to_string() } else { format!("{:.6}", f.psnr) };
            let _ = writeln!(s, "{},{},{:.6}", f.frame, p, f.ssim);
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("null".to_string(), |v| format!("{v:.6}"));
        format!(
            "{{\n  \"view\": {},\n  \"frames\": {},\n  \"mean_psnr\": {:.6},\n  \"mean_ssim\": {:.6},\n  \"tof\": {},\n  \"ofps\": {},\n  \"ofps_gt\": {},\n  \"profile_row\": {}\n}}\n",
            self.view,
            self.frames.len(),
            self.mean_psnr,
            self.mean_ssim,
            opt(self.tof),
            opt(self.ofps),
            opt(self.ofps_gt),
            self.profile_row
        )
    }
}

/// Frames listed in a render directory's manifest, in manifest order.
pub fn read_rendered(dir: &Path) -> Result<(Manifest, Vec<Image>)> {
    let p = dir.join(MANIFEST);
    if !p.is_file() {
        return Err(Error::NotFound(p.display().to_string()));
    }
    let m = Manifest::from_text(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
    let imgs = m.entries.iter().map(|e| read_frame(&dir.join(&e.file)).map(|f| f.to_image())).collect::<Result<_>>()?;
    Ok((m, imgs))
}

/// Metrics of `rendered` (frames `indices`) against the matching ground-truth frames.
pub fn evaluate_images(
    rendered: &[Image],
    gt: &[Image],
    indices: &[usize],
    view: usize,
    fps: usize,
) -> Result<(EvalSummary, Option<Image>)> {
    if rendered.len() != gt.len() || rendered.len() != indices.len() {
        return Err(Error::Core(morel_core::Error::InvalidInput("sequence lengths differ".into())));
    }
    let mut frames = Vec::with_capacity(rendered.len());
    for ((r, g), &t) in rendered.iter().zip(gt).zip(indices) {
        frames.push(FrameMetrics { frame: t, psnr: psnr(r, g), ssim: ssim(r, g)? });
    }
    let n = frames.len().max(1) as f64;
    // infinite PSNR frames are capped so one identical frame cannot dominate the mean
    let mean_psnr = frames.iter().map(|f| f.psnr.min(100.0)).sum::<f64>() / n;
    let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
    let (mut tof, mut ofps, mut ofps_gt, mut profile) = (None, None, None, None);
    let row = rendered.first().map_or(0, |i| i.height / 2);
    if rendered.len() >= 2 {
        let fr = sequence_flows(rendered)?;
        let fg = sequence_flows(gt)?;
        tof = Some(tof_from_flows(&fr, &fg)?);
        ofps = Some(ofps_from_flows(&fr, fps, OFPS_THRESHOLD)?);
        ofps_gt = Some(ofps_from_flows(&fg, fps, OFPS_THRESHOLD)?);
    }
    if !rendered.is_empty() {
        profile = Some(temporal_profile(rendered, row)?);
    }
    let summary = EvalSummary { view, frames, mean_psnr, mean_ssim, tof, ofps, ofps_gt, profile_row: row };
    Ok((summary, profile))
}

/// Evaluates a render directory against a dataset directory and writes
/// `out_csv`, `summary.txt` and `profile.ppm` (the latter two beside the CSV).
pub fn evaluate_dirs(render_dir: &Path, gt_dir: &Path, out_csv: &Path) -> Result<EvalSummary> {
    let (m, rendered) = read_rendered(render_dir)?;
    let spec = read_spec(gt_dir)?;
    let indices: Vec<usize> = m.entries.iter().map(|e| e.index).collect();
    let mut gt = Vec::with_capacity(indices.len());
    for &t in &indices {
        if t >= spec.frames || m.view >= spec.views {
            return Err(Error::NotFound(frame_path(gt_dir, m.view, t).display().to_string()));
        }
        gt.push(read_frame(&frame_path(gt_dir, m.view, t))?.to_image());
    }
    let (summary, profile) = evaluate_images(&rendered, &gt, &indices, m.view, spec.fps)?;
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out_csv, summary.csv()).map_err(io_err(out_csv))?;
    let dir = out_csv.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let p = dir.join("summary.txt");
    fs::write(&p, summary.summary_text()).map_err(io_err(&p))?;
    if let Some(img) = profile {
        write_image(&dir.join("profile.ppm"), &img)?;
    }
    Ok(summary)
}
