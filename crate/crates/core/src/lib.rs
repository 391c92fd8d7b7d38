//! Few-step diffusion-GAN text-to-speech with style-conditioned layer
//! normalization, sized to train on a laptop CPU.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod discriminator;
pub mod engine;
pub mod error;
pub mod generator;
pub mod nn;
pub mod norm;
pub mod objectives;
pub mod rng;
pub mod schedule;
pub mod style;

pub use error::{Error, Result};
