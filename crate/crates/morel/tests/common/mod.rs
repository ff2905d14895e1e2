#![allow(dead_code)]

use std::path::Path;

use morel::config::PipelineConfig;
use morel::dataset::{read_dataset, write_dataset, Dataset};
use morel_core::scenegen::{generate, SceneSpec};
use morel_core::schedule::StageIters;

/// 26 frames, two views, 48²: four key frames, the last one with a two-frame tail.
pub fn tiny_spec() -> SceneSpec {
    SceneSpec { frames: 26, views: 2, width: 48, height: 48, static_count: 12, ..SceneSpec::default() }
}

pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig { gop: 8, iters: StageIters { gca: 120, kfa: 40, pwd: 80, ifb: 30 }, ..PipelineConfig::default() };
    c.train.densify.interval = 20;
    c.init.points_per_frame = 150;
    c.grid_voxel = 0.05;
    c
}

pub fn tiny_dataset(dir: &Path) -> Dataset {
    let spec = tiny_spec();
    let gt = generate(&spec).unwrap();
    write_dataset(dir, &spec, &gt).unwrap();
    read_dataset(dir).unwrap()
}

pub fn write_config(path: &Path, cfg: &PipelineConfig) {
    std::fs::write(path, cfg.to_text()).unwrap();
}
