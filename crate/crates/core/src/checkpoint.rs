//! Checkpoint directories: `manifest.json` plus one DGFT file per parameter.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{io, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_params(dir: &Path, named: &[(String, &Tensor)]) -> Result<Vec<ParamEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    named
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.dgft");
            io::write_dgft(dir.join(&file), t)?;
            Ok(ParamEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

/// Read parameters back, checking names and shapes against `expected`.
pub fn read_params(dir: &Path, entries: &[ParamEntry], expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor>> {
    if entries.len() != expected.len() {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            reason: format!(
                "manifest lists {} parameters, model needs {}",
                entries.len(),
                expected.len()
            ),
        });
    }
    entries
        .iter()
        .zip(expected)
        .map(|(e, (name, shape))| {
            let path = dir.join(&e.file);
            let t = io::read_dgft(&path)?;
            if &e.name != name || t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    path,
                    reason: format!(
                        "expected parameter {name} {shape:?}, found {} {:?}",
                        e.name,
                        t.shape()
                    ),
                });
            }
            Ok(t)
        })
        .collect()
}
