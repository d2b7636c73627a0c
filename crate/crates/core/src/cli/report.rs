use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const JSON_REPORT_FILE: &str = "report.json";
pub const TEXT_REPORT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Machine-readable verdict shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Seed that reproduces the first failure, if any.
    pub failing_seed: Option<u64>,
}

impl JsonReport {
    /// Worst of several reports; the first failing seed wins.
    pub fn merge(reports: &[JsonReport]) -> JsonReport {
        JsonReport {
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
            max_abs_err: reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max),
            tolerance: reports.iter().map(|r| r.tolerance).fold(0.0, f64::max),
            passed: reports.iter().all(|r| r.passed),
            failing_seed: reports.iter().find_map(|r| r.failing_seed),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub(crate) fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Record of one invocation: what ran, with which settings, and what it wrote.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub version: &'static str,
    pub outputs: Vec<PathBuf>,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub(crate) fn new(argv: &[String], seed: u64) -> Self {
        Self {
            command: argv.join(" "),
            config: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            outputs: Vec::new(),
            started: unix_seconds(),
            finished: 0,
        }
    }

    pub(crate) fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "started_unix = {}", self.started);
        let _ = writeln!(s, "finished_unix = {}", self.finished);
        s.push_str("\n[config]\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n[outputs]\n");
        for o in &self.outputs {
            let _ = writeln!(s, "{}", o.display());
        }
        s
    }
}

/// Writes named files into `dir` and tracks them in the manifest.
pub(crate) struct OutputDir<'a> {
    dir: &'a Path,
    pub manifest: RunManifest,
}

impl<'a> OutputDir<'a> {
    pub fn create(dir: &'a Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    pub fn track(&mut self, path: PathBuf) {
        self.manifest.outputs.push(path);
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.finished = unix_seconds();
        let path = self.path(MANIFEST_FILE);
        self.manifest.outputs.push(path.clone());
        fs::write(path, self.manifest.to_text())?;
        Ok(())
    }
}
