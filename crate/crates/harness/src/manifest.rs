//! `manifest.json`: resolved configuration, seeds and artifact version.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::config::RunConfig;

/// Version string baked in at build time from `git describe`.
pub const VERSION: &str = env!("CILAB_VERSION");

pub fn to_json(cfg: &RunConfig, files: &[PathBuf]) -> Value {
    let config: Map<String, Value> = cfg
        .resolved
        .iter()
        .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
        .collect();
    let names: Vec<String> = files
        .iter()
        .map(|p| {
            p.file_name()
                .map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
        })
        .collect();
    json!({
        "command": cfg.command.as_str(),
        "version": VERSION,
        "config": config,
        "seeds": cfg.seeds,
        "n_values": cfg.n_values,
        "schemes": cfg.schemes.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        "files": names,
    })
}

pub fn write(cfg: &RunConfig, files: &[PathBuf]) -> io::Result<PathBuf> {
    let path = cfg.out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&to_json(cfg, files)).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Reads back a manifest written by [`write`].
pub fn read(path: &Path) -> io::Result<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(io::Error::other)
}
