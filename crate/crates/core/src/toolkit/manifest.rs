use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::TOOLKIT_VERSION;

pub const MANIFEST_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one CLI run: enough to re-execute it and to check the result.
///
/// `invocation` holds the fully resolved arguments, with any config file
/// inlined, so a rerun does not depend on the original config path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u64,
    pub toolkit_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub invocation: Value,
    pub seeds: Vec<u64>,
    /// Output files, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>, invocation: Value, seeds: Vec<u64>) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            command: command.to_string(),
            argv,
            invocation,
            seeds,
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("serializing manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let malformed = |reason: String| Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        };
        let value: Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        match value.get("manifest_version").and_then(Value::as_u64) {
            None => return Err(malformed("missing manifest_version".into())),
            Some(MANIFEST_VERSION) => {}
            Some(found) => {
                return Err(Error::UnsupportedVersion {
                    found,
                    expected: MANIFEST_VERSION,
                })
            }
        }
        serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
    }

    /// Names of recorded outputs whose bytes differ between two run directories.
    pub fn differing_outputs(&self, a: &Path, b: &Path) -> Result<Vec<String>> {
        let mut differ = Vec::new();
        for name in &self.outputs {
            let read = |dir: &Path| {
                let p = dir.join(name);
                fs::read(&p).map_err(|e| Error::io(p, e))
            };
            if read(a)? != read(b)? {
                differ.push(name.clone());
            }
        }
        Ok(differ)
    }
}
