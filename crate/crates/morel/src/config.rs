//! Flat `key = value` pipeline configuration with dotted section names.

use std::fmt::Write as _;

use morel_core::fhd::DensifyConfig;
use morel_core::scene::AnchorShape;
use morel_core::schedule::StageIters;
use morel_core::train::TrainConfig;

use crate::error::{Error, Result};

/// How the initial point cloud is sampled from the generator's oracle states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub frame_stride: usize,
    pub points_per_frame: usize,
    pub decimate_voxel: f64,
    pub max_points: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { frame_stride: 20, points_per_frame: 20, decimate_voxel: 0.01, max_points: 6000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub gop: usize,
    pub eps: usize,
    pub iters: StageIters,
    pub shape: AnchorShape,
    pub grid_voxel: f64,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub log_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.frame.render.alpha_min = 1.0 / 255.0;
        PipelineConfig {
            seed: 0,
            gop: 40,
            eps: 2,
            iters: StageIters::default(),
            shape: AnchorShape::default(),
            grid_voxel: 0.025,
            init: InitConfig::default(),
            train,
            log_every: 50,
        }
    }
}

trait Field: Sized {
    fn parse(v: &toml::Value) -> Option<Self>;
    fn emit(&self) -> String;
}

impl Field for f64 {
    fn parse(v: &toml::Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64)).filter(|x| x.is_finite())
    }

    fn emit(&self) -> String {
        format!("{self:?}")
    }
}

impl Field for usize {
    fn parse(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }

    fn emit(&self) -> String {
        self.to_string()
    }
}

impl Field for u32 {
    fn parse(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| u32::try_from(i).ok())
    }

    fn emit(&self) -> String {
        self.to_string()
    }
}

impl Field for u64 {
    fn parse(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }

    fn emit(&self) -> String {
        self.to_string()
    }
}

impl Field for bool {
    fn parse(v: &toml::Value) -> Option<Self> {
        v.as_bool()
    }

    fn emit(&self) -> String {
        self.to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ $([$idx:literal])? : $ty:ty),* $(,)?) => {
        /// Every recognised key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(c: &mut PipelineConfig, key: &str, v: &toml::Value) -> Result<()> {
            match key {
                $($key => {
                    c.$($field).+ $([$idx])? = <$ty as Field>::parse(v).ok_or_else(|| Error::Config {
                        key: key.to_string(),
                        reason: format!("expected {}, found {}", stringify!($ty), v),
                    })?;
                })*
                _ => return Err(Error::Config { key: key.to_string(), reason: "unknown key".into() }),
            }
            Ok(())
        }

        fn entries(c: &PipelineConfig) -> Vec<(&'static str, String)> {
            vec![$(($key, <$ty as Field>::emit(&c.$($field).+ $([$idx])?))),*]
        }
    };
}

keys! {
    "seed" => seed: u64,
    "plan.gop" => gop: usize,
    "plan.eps" => eps: usize,
    "iters.gca" => iters.gca: usize,
    "iters.kfa" => iters.kfa: usize,
    "iters.pwd" => iters.pwd: usize,
    "iters.ifb" => iters.ifb: usize,
    "anchor.feature_dim" => shape.feature_dim: usize,
    "anchor.n_offsets" => shape.n_offsets: usize,
    "anchor.hidden" => shape.hidden: usize,
    "anchor.grid_voxel" => grid_voxel: f64,
    "init.frame_stride" => init.frame_stride: usize,
    "init.points_per_frame" => init.points_per_frame: usize,
    "init.decimate_voxel" => init.decimate_voxel: f64,
    "init.max_points" => init.max_points: usize,
    "lr.feature" => train.lr.feature: f64,
    "lr.offsets" => train.lr.offsets: f64,
    "lr.scaling" => train.lr.scaling: f64,
    "lr.decoder" => train.lr.decoder: f64,
    "lr.grids" => train.lr.grids: f64,
    "lr.deform_mlp" => train.lr.deform_mlp: f64,
    "lr.blend" => train.lr.blend: f64,
    "loss.lambda_ssim" => train.loss.lambda_ssim: f64,
    "render.alpha_min" => train.frame.render.alpha_min: f64,
    "render.min_transmittance" => train.frame.render.min_transmittance: f64,
    "blend.lambda_decay" => train.frame.blend.lambda_decay: f64,
    "deform.resolution" => train.deform.resolution: usize,
    "deform.channels" => train.deform.channels: usize,
    "deform.hidden" => train.deform.hidden: usize,
    "deform.lambda_identity" => train.deform.lambda_identity: f64,
    "fhd.enabled" => train.densify.enabled: bool,
    "fhd.q1" => train.densify.q1: f64,
    "fhd.q2" => train.densify.q2: f64,
    "fhd.grad_threshold" => train.densify.grad_threshold: f64,
    "fhd.opacity_threshold" => train.densify.opacity_threshold: f64,
    "fhd.success_min" => train.densify.success_min: u32,
    "fhd.lambda1" => train.densify.lambda[0]: f64,
    "fhd.lambda2" => train.densify.lambda[1]: f64,
    "fhd.interval" => train.densify.interval: usize,
    "fhd.prune_freeze" => train.densify.prune_freeze: f64,
    "fhd.feature_noise" => train.densify.feature_noise: f64,
    "train.gca_densify" => train.gca_densify: bool,
    "train.log_every" => log_every: usize,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

impl PipelineConfig {
    /// Parses `text` on top of the defaults. Errors name the offending key.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: offending_key(text, &e).unwrap_or_else(|| "<syntax>".into()),
            reason: e.message().to_string(),
        })?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in &flat {
            set_key(self, k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .ok_or_else(|| Error::Config { key: key.into(), reason: format!("cannot parse `{value}`") })?;
        set_key(self, key, &v)?;
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in entries(self) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if self.gop == 0 {
            return fail("plan.gop", "must be positive");
        }
        for (k, v) in [("iters.gca", self.iters.gca), ("iters.kfa", self.iters.kfa), ("iters.pwd", self.iters.pwd), ("iters.ifb", self.iters.ifb)] {
            if v == 0 {
                return fail(k, "must be positive");
            }
        }
        if !(self.grid_voxel > 0.0) {
            return fail("anchor.grid_voxel", "must be positive");
        }
        if self.shape.feature_dim == 0 || self.shape.n_offsets == 0 || self.shape.hidden == 0 {
            return fail("anchor.feature_dim", "anchor shape entries must be positive");
        }
        let d: &DensifyConfig = &self.train.densify;
        if !(0.0 < d.q1 && d.q1 < d.q2 && d.q2 < 1.0) {
            return fail("fhd.q1", "need 0 < q1 < q2 < 1");
        }
        if !(self.train.frame.blend.lambda_decay > 0.0) {
            return fail("blend.lambda_decay", "must be positive");
        }
        if !(self.init.decimate_voxel > 0.0) {
            return fail("init.decimate_voxel", "must be positive");
        }
        if self.init.max_points < 2 {
            return fail("init.max_points", "must be at least 2");
        }
        if self.init.frame_stride == 0 {
            return fail("init.frame_stride", "must be positive");
        }
        Ok(())
    }
}

/// Best effort: the key on the line the parser complained about.
fn offending_key(text: &str, e: &toml::de::Error) -> Option<String> {
    let span = e.span()?;
    let line_start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_exact() {
        let mut c = PipelineConfig::default();
        c.train.densify.q1 = 0.55;
        c.train.frame.render.alpha_min = 1e-7;
        c.seed = 99;
        let back = PipelineConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn dotted_and_sectioned_forms_agree() {
        let a = PipelineConfig::from_text("fhd.q1 = 0.5\nplan.gop = 20\n").unwrap();
        let b = PipelineConfig::from_text("[fhd]\nq1 = 0.5\n[plan]\ngop = 20\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.densify.q1, 0.5);
        assert_eq!(a.gop, 20);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |t: &str| match PipelineConfig::from_text(t) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key("fhd.q9 = 1"), "fhd.q9");
        assert_eq!(key("plan.gop = \"x\""), "plan.gop");
        assert_eq!(key("plan.gop = 0"), "plan.gop");
        assert_eq!(key("fhd.q1 = 0.95"), "fhd.q1");
        assert_eq!(key("iters.gca = = 3"), "iters.gca");
    }

    #[test]
    fn every_key_is_emitted() {
        let text = PipelineConfig::default().to_text();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
        }
    }
}
