use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use omni_core::tensor::Mat;
use serde::Serialize;
use serde_json::json;

pub const SCHEMA_VERSION: u32 = 1;

/// Versioned JSON envelope for a command result.
pub fn envelope<T: Serialize>(command: &str, result: &T) -> Result<String> {
    let v = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "result": result,
    });
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Prints the JSON envelope when `json` is set, otherwise the text form.
pub fn emit<T: Serialize>(json: bool, command: &str, result: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        print!("{}", envelope(command, result)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, command: &str, result: &T) -> Result<()> {
    fs::write(path, envelope(command, result)?).with_context(|| format!("writing {}", path.display()))
}

/// Raw little-endian f32 data at `path`, shape header at `path.json`.
pub fn write_tensor(path: &Path, name: &str, m: &Mat) -> Result<()> {
    let mut blob = Vec::with_capacity(4 * m.len());
    for v in m.data() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, blob).with_context(|| format!("writing {}", path.display()))?;
    let mut header = path.as_os_str().to_owned();
    header.push(".json");
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "dtype": "f32",
        "shape": [m.rows(), m.cols()],
    });
    fs::write(&header, serde_json::to_string_pretty(&meta)? + "\n")
        .with_context(|| format!("writing {}", Path::new(&header).display()))
}
