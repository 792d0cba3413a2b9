//! Super-resolution of the Sentinel-2 20m bands to 10m with an unfolded,
//! geometry-guided back-projection network.
//!
//! The crate covers the whole desk-scale pipeline: the `S2SR` raster format
//! and spectral products ([`raster`]), Wald-protocol samples and manifests
//! ([`dataset`]), procedural test scenes ([`synth`]), the guiding image
//! ([`guidance`]), the model ([`network`]), training and checkpoints
//! ([`training`]), quality metrics ([`metrics`]), ablation grids
//! ([`ablation`]) and a built-in consistency check ([`selftest`]).

pub mod ablation;
pub mod dataset;
mod error;
pub mod guidance;
mod layers;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod selftest;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use s2fuse_autograd as autograd;
