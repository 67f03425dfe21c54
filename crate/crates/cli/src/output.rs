//! Output placement and small input helpers shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

/// Every output lands in one directory, created on first write.
pub struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
        }
    }

    /// Remember an input so no output may overwrite it.
    pub fn input(&mut self, path: &Path) {
        if let Ok(p) = path.canonicalize() {
            self.inputs.push(p);
        }
    }

    /// Resolve an output name; fails if it would replace an input.
    pub fn path(&self, name: impl AsRef<Path>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(p) = path.canonicalize() {
            if self.inputs.contains(&p) {
                return Err(CliError::invalid(format!("output {} would overwrite an input", path.display())));
            }
        }
        Ok(path)
    }

    /// Create the output directory.
    pub fn prepare(&self) -> CliResult {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::Io(format!("{}: {e}", self.dir.display())))
    }

    pub fn write_bytes(&self, name: impl AsRef<Path>, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(name)?;
        self.prepare()?;
        // stage next to the target so a failed write never leaves a partial file
        let staged = path.with_extension("partial");
        fs::write(&staged, bytes)
            .and_then(|_| fs::rename(&staged, &path))
            .map_err(|e| {
                let _ = fs::remove_file(&staged);
                CliError::Io(format!("{}: {e}", path.display()))
            })?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: impl AsRef<Path>, value: &T) -> CliResult<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::invalid(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Render with `f` into memory, then write.
    pub fn write_with<E: ToString>(
        &self,
        name: impl AsRef<Path>,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::invalid(e.to_string()))?;
        self.write_bytes(name, &buf)
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// A JSON object from an optional config file with flag values laid on top.
/// Flags use the config's field names, so either source can set any field.
pub fn layered_config(defaults: Value, file: Option<&Path>, flags: Vec<(&str, Option<Value>)>) -> CliResult<Value> {
    let mut merged = defaults;
    if let Some(path) = file {
        let text = read_text(path)?;
        let from_file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = from_file else {
            return Err(CliError::invalid(format!("{}: expected a JSON object", path.display())));
        };
        let target = merged.as_object_mut().expect("defaults are an object");
        target.extend(map);
    }
    let target = merged.as_object_mut().expect("defaults are an object");
    for (key, value) in flags {
        if let Some(v) = value {
            target.insert(key.to_string(), v);
        }
    }
    Ok(merged)
}

pub fn from_value<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| CliError::invalid(format!("{what}: {e}")))
}

/// File stem as an identifier.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
