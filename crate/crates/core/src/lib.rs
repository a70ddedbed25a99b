//! Text-conditioned video generation with a latent path generator and a
//! multi-head discriminator.

pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nta;
pub mod text;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::Model;
pub use pathvid_nn;
pub use training::Trainer;
