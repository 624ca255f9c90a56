//! Networks and training loops for prompt-driven camera-noise synthesis, on candle tensors.

pub mod checkpoint;
pub mod cmtrain;
pub mod denoise;
pub mod error;
pub mod genpipe;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod pae;
pub mod pdit;
pub mod params;
pub mod train;

pub use error::{Error, Result};
