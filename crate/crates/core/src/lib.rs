//! Deletion-based sentence compression as token-level binary segmentation.
//!
//! A token-wise 1-D U-Net and a stacked BiLSTM baseline are trained on
//! per-token features (static word embeddings or pre-extracted contextual
//! layers) to predict a retain/delete mask over a fixed 64-token window.

pub mod data;
pub mod error;
pub mod features;
pub mod models;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
