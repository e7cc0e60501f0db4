//! Disentangling the representations of a frozen transformer encoder by
//! learning one binary mask per aspect over its final layers.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: a small reverse-mode autodiff engine.
//! - [`encoder`]: a compact transformer encoder with maskable final layers.
//! - [`masking`]: continuous masks, thresholding and straight-through updates.
//! - [`losses`]: triplet, classification and overlap losses.
//! - [`pruning`]: global magnitude pruning and prune-then-mask.
//! - [`data`]: synthetic two-aspect data with a controllable label joint.
//! - [`evaluation`]: probes, leakage, subgroup and equalized-odds metrics.
//! - [`experiment`]: configuration, pipelines, sweeps and reports.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod masking;
pub mod optim;
pub mod params;
pub mod pruning;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
