//! Coarse-to-fine instance mask refinement over sparse quadtree nodes.
//!
//! The pipeline, per instance box:
//!
//! 1. [`features`] extracts a small four-level convolutional pyramid and
//!    bilinearly samples a ladder of RoI grids (7, 14, 28, 56 cells per side).
//! 2. [`model`] predicts a 14×14 coarse mask and per-cell incoherence scores.
//! 3. [`quadtree`] grows a three-level quadtree over the incoherent cells and
//!    serializes it, after the 49 coarse context points, into a node sequence.
//! 4. The node encoder, self-attention recalibration, the relative-position
//!    biased sequence encoder and the pixel decoder label every node.
//! 5. Quadtree propagation pastes the node labels over the upsampled coarse
//!    mask to produce the 56×56 refined mask.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and wall-clock
//! timing live in the companion `maskrefine` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;

pub mod config;
pub mod eval;
pub mod features;
pub mod model;
pub mod numcore;
pub mod quadtree;
pub mod training;

pub use error::{Error, Result};
pub use config::Config;
