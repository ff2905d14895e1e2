//! Anchor-relay dynamic Gaussian splatting on 2D(+time) scenes.
//!
//! This crate holds the pure numerical core: the anchor-point scene model and
//! its neural Gaussian decoder, a differentiable 2D splat renderer with
//! hand-derived backward passes, plane-factorized bidirectional deformation
//! fields, learnable temporal-opacity blending, feature-variance-guided
//! hierarchical densification, quality/temporal metrics and a synthetic scene
//! generator. Everything here works on in-memory values; file formats, the
//! bundle store and the stage scheduler live in the `morel` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. The `parallel` feature enables row-parallel rendering; results are
//! bit-identical with and without it.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod blend;
pub mod deform;
pub mod diff;
pub mod fhd;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod render;
pub mod scene;
pub mod scenegen;
pub mod schedule;
pub mod train;

mod error;
pub(crate) mod math;

pub use error::{Error, Result};
pub use image::Image;
pub use model::Bundle;
pub use render::{RenderConfig, ViewTransform};
pub use scene::{AnchorPoint, AnchorSpace, GaussianAttributes, SpaceKind};
