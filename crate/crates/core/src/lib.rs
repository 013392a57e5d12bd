//! Parameter-inverted image pyramid networks.
//!
//! Multi-resolution ViT branches where larger images feed smaller models,
//! coupled by gated cross-branch interaction units and fused by a weighted
//! branch-merging module. The crate also carries the analytical
//! parameter/MAC cost model, a budgeted design-space sweep, checkpoint and
//! config IO, and a toy trainer.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod interaction;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod params;
pub mod sweep;
pub mod train;
pub mod vit;

pub use config::{BranchConfig, ConfigFile, InteractionSpec, Mode, PiipConfig};
pub use cost::{count_macs, count_params, instrumented_macs, CostReport};
pub use error::{Error, Result};
pub use model::Model;
