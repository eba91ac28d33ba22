use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNS_FILE: &str = "runs.jsonl";

/// Record of one CLI invocation. Appended as one JSON line to `runs.jsonl`
/// in the run's output directory; existing lines are never rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub args: Vec<String>,
    /// Resolved configuration after file loading and flag overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: Vec<String>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            config: serde_json::Value::Null,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn append_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUNS_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(self).expect("manifest serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn read_all(dir: &Path) -> Result<Vec<Self>> {
        let path = dir.join(RUNS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}
