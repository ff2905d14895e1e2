//! Key-frame timing: chunks, bidirectional windows and tolerance windows.

use alloc::format;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageIters {
    pub gca: usize,
    pub kfa: usize,
    pub pwd: usize,
    pub ifb: usize,
}

impl Default for StageIters {
    fn default() -> Self {
        StageIters { gca: 3000, kfa: 1000, pwd: 2000, ifb: 1500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainPlan {
    pub frames: usize,
    pub gop: usize,
    /// Temporal tolerance of key-frame training, in frames.
    pub eps: usize,
    pub iters: StageIters,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Chunk,
    Bdw,
    Eps,
}

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub lo: usize,
    pub hi: usize,
}

impl FrameRange {
    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo <= t && t <= self.hi
    }
}

impl TrainPlan {
    pub fn new(frames: usize, gop: usize, eps: usize, iters: StageIters, seed: u64) -> Result<Self> {
        if frames == 0 || gop == 0 {
            return Err(Error::invalid("frame count and GOP must be positive"));
        }
        if iters.gca == 0 || iters.kfa == 0 || iters.pwd == 0 || iters.ifb == 0 {
            return Err(Error::invalid("iteration counts must be positive"));
        }
        Ok(TrainPlan { frames, gop, eps, iters, seed })
    }

    /// Number of key frames, `⌈T / GOP⌉`.
    pub fn keys(&self) -> usize {
        self.frames.div_ceil(self.gop)
    }

    pub fn key_time(&self, n: usize) -> usize {
        n * self.gop
    }

    /// Frame range of `kind` around key `n`, clamped to `[0, T-1]`.
    ///
    /// The chunk of the last key may extend past the sequence; it is clamped too.
    pub fn window_of(&self, kind: WindowKind, n: usize) -> Result<FrameRange> {
        if n >= self.keys() {
            return Err(Error::invalid(format!("key {n} out of range 0..{}", self.keys())));
        }
        let t_n = self.key_time(n);
        let last = self.frames - 1;
        Ok(match kind {
            WindowKind::Chunk => FrameRange { lo: t_n, hi: (t_n + self.gop).min(last) },
            WindowKind::Bdw => FrameRange { lo: t_n.saturating_sub(self.gop), hi: (t_n + self.gop).min(last) },
            WindowKind::Eps => FrameRange { lo: t_n.saturating_sub(self.eps), hi: (t_n + self.eps).min(last) },
        })
    }

    /// `τ` of frame `t` relative to key `n`.
    pub fn tau(&self, t: usize, n: usize) -> Result<f64> {
        crate::deform::normalize_time(t, self.key_time(n), self.gop, self.frames)
    }

    /// Key pair needed to render frame `t`: `(⌊t/GOP⌋, min(n+1, N-1))`.
    pub fn required_anchors(&self, t: usize) -> Result<(usize, usize)> {
        required_anchors(t, self.gop, self.frames)
    }
}

pub fn required_anchors(t: usize, gop: usize, frames: usize) -> Result<(usize, usize)> {
    if gop == 0 || t >= frames {
        return Err(Error::invalid(format!("frame {t} outside 0..{frames}")));
    }
    let keys = frames.div_ceil(gop);
    let n = t / gop;
    Ok((n, (n + 1).min(keys - 1)))
}
