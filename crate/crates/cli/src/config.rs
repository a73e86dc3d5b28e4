//! Merging a TOML config file with command-line flags.
//!
//! Top-level scalar keys apply to every command, a `[command-name]` table
//! overrides them for that command, and flags given on the command line
//! override both. Keys are the long flag names (`noise-std`, `batch-size`).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const COMMANDS: [&str; 8] = [
    "gen-data",
    "train-denoiser",
    "train-nlc",
    "build-lut",
    "sample",
    "restore",
    "eval",
    "report",
];

/// Flag values for `command` after layering in `config_path`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    flags: &T,
    config_path: Option<&Path>,
    command: &str,
) -> CliResult<T> {
    let flag_map = match serde_json::to_value(flags).map_err(|e| CliError::config(e.to_string()))? {
        Value::Object(map) => map,
        _ => unreachable!("argument structs serialize to maps"),
    };
    let mut merged = match config_path {
        Some(path) => file_layer(path, command)?,
        None => Map::new(),
    };
    for (key, value) in flag_map {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::config(format!("{command}: {e}")))
}

fn file_layer(path: &Path, command: &str) -> CliResult<Map<String, Value>> {
    if !path.is_file() {
        return Err(CliError::config(format!("config file {} does not exist", path.display())));
    }
    let text = fs::read_to_string(path)?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
    let Value::Object(top) = serde_json::to_value(table).map_err(|e| CliError::config(e.to_string()))? else {
        unreachable!("a TOML table serializes to a map")
    };
    let mut out = Map::new();
    let mut section = None;
    for (key, value) in top {
        if COMMANDS.contains(&key.as_str()) {
            if key == command {
                match value {
                    Value::Object(map) => section = Some(map),
                    _ => return Err(CliError::config(format!("[{key}] must be a table"))),
                }
            }
        } else {
            out.insert(key, value);
        }
    }
    out.extend(section.unwrap_or_default());
    Ok(out)
}
