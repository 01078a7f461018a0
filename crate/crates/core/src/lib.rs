//! Long-term action anticipation with multimodal fusion in front of a frozen
//! sequence backbone.
//!
//! Past action labels (text), per-frame visual features and a bank of learned
//! action queries are adapted to a common width, fused by a cross-modality
//! interaction block, passed through a small trainable bottleneck and a frozen
//! transformer, and decoded into past segmentation logits plus future
//! (class, duration) pairs in parallel.

pub mod adapters;
pub mod backbone;
pub mod cmib;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod objective;
pub mod par;
pub mod runner;
pub mod tensorkit;

pub use config::{ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use model::ActionModel;
