//! JSON or TOML configuration files, chosen by extension.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if is_toml(path) {
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

pub fn save_config<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = if is_toml(path) {
        toml::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?
    } else {
        serde_json::to_string_pretty(value)?
    };
    std::fs::write(path, text)?;
    Ok(())
}
