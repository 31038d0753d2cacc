//! Unsupervised singing voice conversion with adversarial singer/pitch
//! disentanglement: a WaveNet-style autoencoder whose encoder is trained
//! against a singer classifier and a pitch regressor, with explicit pitch
//! and singer-embedding conditioning at the decoder.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pitch;
pub mod training;

pub use error::{Error, Result};
