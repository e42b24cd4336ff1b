//! temporary scaffold
pub mod aae;
pub mod backbone;
pub mod contrast;
pub mod error;
pub mod hsi;
pub mod nn;
pub mod vae;
pub use error::{Error, Result};

/// N×D float feature table.
pub type FeatureMatrix = ndarray::Array2<f32>;
