//! Kidney and tumor segmentation with a multi-scale supervised 3D U-Net.
//!
//! The pipeline runs preprocessing, patch-based training with deep
//! supervision and an exponential-logarithmic Dice + weighted cross-entropy
//! loss, sliding-window inference with mirror averaging, and
//! connected-component post-processing. A synthetic phantom generator
//! provides ground truth for end-to-end checks.

pub mod augment;
pub mod config;
pub mod error;
pub mod evalreport;
pub mod inference;
pub mod loss;
pub mod msunet;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
mod seeds;
pub mod trainer;
pub mod volcore;

pub use error::{Error, Result};
