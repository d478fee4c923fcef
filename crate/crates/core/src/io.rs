//! JSON helpers shared by the artifact writers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{DbmError, Result};

/// Schema tag written into every JSON artifact.
pub const SCHEMA: &str = "dbm/1";

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DbmError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DbmError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DbmError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DbmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DbmError::json(path, e))
}

/// Checks the `schema` field of a deserialized artifact.
pub fn check_schema(path: &Path, schema: &str) -> Result<()> {
    if schema != SCHEMA {
        return Err(DbmError::Invalid(format!(
            "{}: unsupported schema {schema:?}, expected {SCHEMA:?}",
            path.display()
        )));
    }
    Ok(())
}
