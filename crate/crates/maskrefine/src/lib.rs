//! File formats, overlays and the command-line front end for
//! [`maskrefine_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod overlay;
pub mod report;
pub mod settings;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{read_dataset, write_dataset};
pub use error::{Error, Result};
pub use overlay::render_overlay;
