//! Group-aware visual prompt tuning for multi-label image classification,
//! built from scratch at desk scale.
//!
//! The crate covers the full pipeline:
//!
//! - [`labelgraph`]: class grouping via spectral clustering of co-occurrence
//!   affinity graphs (correlative and discriminative modes);
//! - [`nn`]: a minimal differentiable numeric core (linear, layer norm,
//!   masked multi-head attention, FFN, patch embedding) with exact analytic
//!   gradients;
//! - [`encoder`]: a frozen ViT backbone carrying per-layer grouped prompt
//!   tokens under a cross-group attention mask;
//! - [`moe`]: per-class gated mixture-of-experts turning group-aware prompt
//!   outputs into label-aware representations;
//! - [`heads`]: dual per-class classifiers, asymmetric loss, and averaged
//!   inference;
//! - [`metrics`]: mAP and the OP/OR/OF1, CP/CR/CF1 family;
//! - [`datagen`]: synthetic multi-label images with planted co-occurrence
//!   structure plus distribution-shift probe splits;
//! - [`trainer`]: decoupled-weight-decay optimizer, one-cycle schedule, EMA
//!   shadow weights, early stopping.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod labelgraph;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
