//! TOML run configuration.
//!
//! ```toml
//! seeds = 5            # ablate: number of consecutive seeds
//!
//! [train]              # any TrainConfig field
//! learning_rate = 0.05
//! iterations = 500
//!
//! [gen]                # gen-data: any GenConfig field
//! examples_per_leaf = 20
//!
//! [scenario]           # ablate: any Scenario field
//! shots = 5
//! ```
//!
//! Each section is overlaid key by key on the command's defaults; command-line
//! flags are applied last.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seeds: Option<usize>,
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub gen: Option<toml::Table>,
    #[serde(default)]
    pub scenario: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// `section` overlaid on `defaults`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, section: Option<&toml::Table>, name: &str) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(table) = section {
        let over = serde_json::to_value(table).map_err(|e| CliError::Usage(format!("[{name}]: {e}")))?;
        merge(&mut value, over);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("[{name}]: {e}")))
}
