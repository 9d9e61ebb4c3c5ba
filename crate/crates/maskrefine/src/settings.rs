//! Config files: TOML with dotted keys, for example
//!
//! ```toml
//! model.d_model = 64
//! training.loss_weights.refine = 0.8
//! ```
//!
//! Missing keys keep their defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use maskrefine_core::Config;

use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<Config> {
    let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Renders a config as a TOML document that `parse_config` reads back.
pub fn render_config(config: &Config) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}
