//! Variational sequence-to-sequence recommender with twin latent views,
//! a double-ELBO objective and two-stage meta-optimized training.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod model;
pub mod objective;
pub mod params;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod verification;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
