//! Relighting engine built on neural radiance transfer.
//!
//! The crate covers the whole pipeline: triangle-mesh scenes with a BVH,
//! a Monte Carlo path tracer with environment lighting, a frozen-sample
//! differentiable variant used to fit lighting and material, synthetic
//! one-light-at-a-time (OLAT) dataset generation, a from-scratch neural
//! radiance transfer field (hash grid + spherical harmonics + MLP), its
//! two-stage training, and the precomputed-radiance-transfer relighting
//! renderer with image metrics.

pub mod bsdf;
pub mod bundled;
pub mod bvh;
pub mod camera;
pub mod config;
pub mod envmap;
mod error;
pub mod image;
pub mod invopt;
pub mod math;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod olat;
pub mod optim;
pub mod pathtracer;
pub mod pfm;
pub mod pipeline;
pub mod relight;
pub mod rng;
pub mod scene;
pub mod texture;
pub mod train;

pub use error::{Error, Result};

pub use bsdf::BlendedBsdf;
pub use bvh::BvhTree;
pub use camera::Camera;
pub use envmap::EnvironmentMap;
pub use image::HdrImage;
pub use mesh::TriangleMesh;
pub use scene::{Hit, Ray, Scene};
pub use texture::AlbedoTexture;
