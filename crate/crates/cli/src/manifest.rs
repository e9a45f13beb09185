//! Run manifests: every command writes exactly one `manifest.json` into its
//! output directory, capturing the argv, the fully resolved config, the
//! seeds in effect, and content hashes of inputs and outputs — enough to
//! rerun the command and to check that a rerun reproduced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use unimix_core::data::file_hash;

use crate::config::Config;

#[derive(Debug, Serialize)]
struct ManifestDoc<'a> {
    command: &'a str,
    argv: &'a [String],
    started_utc: String,
    finished_utc: String,
    config: &'a Config,
    seeds: &'a BTreeMap<String, u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Collects manifest facts over a command's lifetime; `write` stamps the
/// finish time, hashes declared outputs, and persists the document.
pub struct Manifest {
    command: String,
    argv: Vec<String>,
    started: DateTime<Utc>,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            started: Utc::now(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Hashes an input file now, before the command can touch anything.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path).with_context(|| format!("hashing input {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Declares an output file; it is hashed when the manifest is written.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest.json` under `out_dir` and returns its path.
    pub fn write(self, config: &Config, out_dir: &Path) -> Result<PathBuf> {
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let h = file_hash(p).with_context(|| format!("hashing output {}", p.display()))?;
            outputs.insert(p.display().to_string(), h);
        }
        let doc = ManifestDoc {
            command: &self.command,
            argv: &self.argv,
            started_utc: self.started.to_rfc3339_opts(SecondsFormat::Secs, true),
            finished_utc: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            config,
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &outputs,
        };
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        let f = fs::File::create(&path)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        serde_json::to_writer_pretty(f, &doc)?;
        Ok(path)
    }
}
