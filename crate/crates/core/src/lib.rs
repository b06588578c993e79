//! AE-LSTM motion switching: tactile autoencoders, modality attention and
//! an LSTM predictive policy trained with a loop-constrained loss, together
//! with a deterministic synthetic cap-opening environment and the analyses
//! used to evaluate it.

pub mod analysis;
pub mod artifacts;
pub mod attention;
pub mod autoencoder;
pub mod config;
pub mod env;
pub mod episode;
pub mod error;
pub mod math;
pub mod pipeline;
pub mod policy;
pub mod preprocess;

pub use error::{Error, Result};
