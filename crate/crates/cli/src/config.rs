//! Flags mirrored in a config file: every flag of a subcommand may also be
//! given as a key (flag name without dashes) either at the top level of the
//! file or in a table named after the subcommand. Flags win over the file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

fn load_file(path: &Path) -> Result<Value> {
    let value: Value = gmn_core::config_file::load_config(path).with_context(|| format!("reading config {}", path.display()))?;
    match value {
        Value::Object(_) => Ok(value),
        _ => anyhow::bail!("config {} must be a table", path.display()),
    }
}

/// Keys for `command`: top-level scalars overlaid with the `[command]` table.
fn section(file: &Value, command: &str) -> Map<String, Value> {
    let mut out = Map::new();
    let Value::Object(top) = file else { return out };
    for (k, v) in top {
        if !v.is_object() {
            out.insert(k.clone(), v.clone());
        }
    }
    if let Some(Value::Object(sub)) = top.get(command) {
        for (k, v) in sub {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Overlays the non-empty values of `flags` onto the config file section.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let mut merged = section(&load_file(path)?, command);
    let Value::Object(cli) = serde_json::to_value(flags)? else {
        anyhow::bail!("flags must serialize to a table");
    };
    for (k, v) in cli {
        let empty = v.is_null() || v.as_array().is_some_and(|a| a.is_empty()) || v == Value::Bool(false);
        if !empty || !merged.contains_key(&k) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("invalid `{command}` settings in {}", path.display()))
}
