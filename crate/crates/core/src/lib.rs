//! Horizontal dropout for silhouette-based gait recognition.
//!
//! The pipeline encodes every frame of a sequence with a small CNN, merges
//! the frame maps by set pooling, reduces the width axis by max and mean,
//! drops whole horizontal rows during training (consecutive or sporadic),
//! and trains the result with a batch-all triplet loss. Evaluation follows
//! the CASIA-B gallery/probe protocol in cross-view and re-identification
//! flavours.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod gradsuite;
pub mod hd;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
