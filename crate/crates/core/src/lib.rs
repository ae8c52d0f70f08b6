//! Latent-space medical image segmentation driven by a Haar wavelet encoder.

pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod lmm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod training;
pub mod types;
pub mod vae;
pub mod wavelet;

pub use error::{Error, Result};
