//! A compact vision transformer laboratory.
//!
//! The crate covers the full leaf-disease classification workflow at desk
//! scale: a small reverse-mode tensor engine, the preprocessing chain
//! (resize, CLAHE, Gaussian blur, `[0, 1]` scaling), class-per-directory
//! datasets with stratified splits and k-fold partitions, a configurable
//! ViT encoder, AdamW training, evaluation metrics (confusion matrix,
//! multiclass MCC, bootstrap intervals, cross-validation, timing) and
//! Grad-CAM heatmaps over transformer tokens.

pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod imageproc;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
