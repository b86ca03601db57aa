//! Training and inference toolkit for an image-conditioned BEGAN refiner.
//!
//! The generator consumes a pyramid of nearest-neighbor downscales of an
//! image instead of a noise vector, and is trained adversarially against an
//! autoencoder discriminator on real images only. Everything runs on CPU in
//! f32, single-threaded and bitwise deterministic for a given seed; an f64
//! verification mode exists for the gradient-check suite.

pub mod backend;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod training;
