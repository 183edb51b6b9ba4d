//! Contrastive alignment of EEG recordings with pooled intermediate-layer
//! visual features, plus the preprocessing, fusion, retrieval and
//! spatial-frequency machinery around it.

#[cfg(feature = "cli")]
pub mod cli;
pub mod contrastive;
pub mod eeg;
pub mod error;
pub mod features;
pub mod freq;
pub mod fusion;
pub mod image;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod retrieval;
mod par;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
