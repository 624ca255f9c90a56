//! Core, framework-free pieces of prompt-driven camera-noise synthesis: consistency-training
//! schedule math, noise-residual statistics and metrics, images, datasets, configuration and
//! the keyed RNG policy.

pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod noisestats;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use image::Image;
