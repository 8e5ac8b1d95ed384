//! Few-shot anomaly detection by contrastive fine-tuning of an image encoder
//! and Mahalanobis scoring under a Gaussian fit to normalized embeddings.

pub mod augment;
pub mod config;
pub mod data;
pub mod density;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
