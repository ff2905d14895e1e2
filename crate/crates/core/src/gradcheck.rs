//! Small randomized scenes on which the analytic backward pass is compared with
//! central finite differences.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blend::{BlendConfig, Direction};
use crate::deform::{DeformConfig, DeformationField};
use crate::diff::{gather, grad_buffer, grad_check, scatter, GradCheckReport};
use crate::image::Image;
use crate::math::ln;
use crate::mlp::Mlp;
use crate::model::{backward, forward, render_frame, BlendMode, Bundle, FrameConfig, Layer, TrainMask};
use crate::render::{RenderConfig, ViewTransform};
use crate::scene::{AnchorPoint, AnchorShape, AnchorSpace, BlendParams, SpaceKind, ATTRS_PER_GAUSSIAN};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    Renderer,
    Deformation,
    Blend,
}

#[derive(Debug, Clone)]
pub struct GradFixture {
    pub bundles: Vec<Bundle>,
    pub layers: Vec<(Option<f64>, BlendMode)>,
    pub view: ViewTransform,
    /// The loss is `Σ upstream · image`.
    pub upstream: Image,
    pub cfg: FrameConfig,
}

fn random_space(rng: &mut ChaCha8Rng, anchors: usize, shape: AnchorShape) -> AnchorSpace {
    let anchors = (0..anchors)
        .map(|_| AnchorPoint {
            position: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            feature: (0..shape.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            log_scaling: [ln(rng.random_range(0.15..0.3)), ln(rng.random_range(0.15..0.3))],
            offsets: (0..shape.n_offsets).map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]).collect(),
            level: Some(0),
            blend_fw: BlendParams { offset: rng.random_range(-0.3..0.3), decay_raw: rng.random_range(-0.5..1.0) },
            blend_bw: BlendParams { offset: rng.random_range(-0.3..0.3), decay_raw: rng.random_range(-0.5..1.0) },
            accum_grad: 0.0,
            accum_count: 0,
            opacity_stat: 0.0,
        })
        .collect();
    let mut decoder = Mlp::random(shape.feature_dim + 2, shape.hidden, shape.n_offsets * ATTRS_PER_GAUSSIAN, 0.6, rng);
    for b in decoder.b1.iter_mut().chain(decoder.b2.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    // keep depth keys well separated so a finite-difference step never reorders them
    for i in 0..shape.n_offsets {
        let row = i * ATTRS_PER_GAUSSIAN + 7;
        decoder.w2[row * shape.hidden..(row + 1) * shape.hidden].iter_mut().for_each(|w| *w *= 0.05);
    }
    AnchorSpace { anchors, decoder, grid_voxel: 0.05, kind: SpaceKind::Global, shape }
}

fn random_field(rng: &mut ChaCha8Rng, n_slots: usize) -> DeformationField {
    let cfg = DeformConfig { resolution: 6, channels: 4, hidden: 8, lambda_identity: 0.0 };
    let mut f = DeformationField::new(0, n_slots, &cfg, rng.random());
    for p in f.planes.iter_mut() {
        p.iter_mut().for_each(|v| *v = rng.random_range(0.2..1.2));
    }
    f.mlp.w2.iter_mut().for_each(|w| *w = rng.random_range(-0.05..0.05));
    f.mlp.b1.iter_mut().for_each(|w| *w = rng.random_range(-0.2..0.2));
    f
}

/// Builds one of the three standard fixtures from `seed`.
pub fn fixture(kind: FixtureKind, seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = AnchorShape { feature_dim: 6, n_offsets: 3, hidden: 8 };
    let view = ViewTransform::new([22.0, 4.0, -3.0, 20.0], [1.0, 2.5], 24, 24).unwrap();
    let upstream = Image::from_fn(24, 24, |_, _| {
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    });
    let cfg = FrameConfig {
        render: RenderConfig { alpha_min: 1e-14, min_transmittance: 0.0 },
        blend: BlendConfig::default(),
    };
    let mut bundle = |with_field: bool| {
        let space = random_space(&mut rng, 3, shape);
        let field = with_field.then(|| random_field(&mut rng, shape.n_offsets));
        Bundle { space, field }
    };
    let (bundles, layers) = match kind {
        FixtureKind::Renderer => (vec![bundle(false)], vec![(None, BlendMode::None)]),
        FixtureKind::Deformation => (vec![bundle(true)], vec![(Some(0.4), BlendMode::None)]),
        FixtureKind::Blend => (
            vec![bundle(true), bundle(true)],
            vec![
                (Some(0.35), BlendMode::Learned(Direction::Forward)),
                (Some(-0.65), BlendMode::Learned(Direction::Backward)),
            ],
        ),
    };
    GradFixture { bundles, layers, view, upstream, cfg }
}

impl GradFixture {
    fn layers_of<'a>(&self, bundles: &'a [Bundle]) -> Vec<Layer<'a>> {
        bundles.iter().zip(&self.layers).map(|(b, &(tau, blend))| Layer { bundle: b, tau, blend }).collect()
    }

    pub fn loss_of(&self, bundles: &[Bundle]) -> f64 {
        let img = render_frame(&self.layers_of(bundles), &self.view, &self.cfg).expect("fixture renders");
        img.data.iter().zip(&self.upstream.data).map(|(a, b)| a * b).sum()
    }

    pub fn loss(&self) -> f64 {
        self.loss_of(&self.bundles)
    }

    /// Analytic gradients of every bundle.
    pub fn analytic(&self, mask: &TrainMask) -> Result<Vec<crate::diff::GradBuffer>> {
        let layers = self.layers_of(&self.bundles);
        let (_, tape) = forward(&layers, &self.view, &self.cfg)?;
        let (grads, _) = backward(&layers, &tape, &self.upstream, mask)?;
        Ok(self.bundles.iter().zip(&grads).map(|(b, g)| grad_buffer(b, g)).collect())
    }
}

/// Max relative error over every parameter of every bundle in the fixture.
pub fn grad_check_fixture(fix: &GradFixture, h: f64) -> Result<GradCheckReport> {
    let analytic = fix.analytic(&TrainMask::ALL)?;
    let mut worst = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (bi, g) in analytic.iter().enumerate() {
        let params = gather(&fix.bundles[bi]);
        let mut probe = fix.bundles.clone();
        let r = grad_check(&params, g, h, |p| {
            scatter(&mut probe[bi], p).expect("layout");
            fix.loss_of(&probe)
        })?;
        worst.checked += r.checked;
        if r.max_rel_error > worst.max_rel_error || r.max_rel_error.is_nan() {
            worst.max_rel_error = r.max_rel_error;
            worst.worst = r.worst;
        }
    }
    Ok(worst)
}
