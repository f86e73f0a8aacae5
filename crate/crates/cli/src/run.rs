use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the directory that holds run directories.
pub const OUT_ENV: &str = "COLLAPSE_LAB_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub status: String,
    pub seed: u64,
    pub rng_algorithm: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub config: BTreeMap<String, String>,
    pub files: Vec<String>,
}

pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunDir {
    /// Creates `$COLLAPSE_LAB_OUT/<name>` and writes a provisional manifest.
    pub fn create(subcommand: &str, name: &str, seed: u64) -> Result<Self, CliError> {
        let out = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from);
        let root = out.join(name);
        fs::create_dir_all(&root)?;
        let run = RunDir {
            root,
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                status: "running".into(),
                seed,
                rng_algorithm: collapse_core::rng::ALGORITHM.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                started_at: now(),
                finished_at: None,
                config: BTreeMap::new(),
                files: Vec::new(),
            },
        };
        run.write_manifest()?;
        Ok(run)
    }

    /// Opens `rel` for writing, creating parent directories, and records it.
    pub fn file(&mut self, rel: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.manifest.files.iter().any(|f| f == rel) {
            self.manifest.files.push(rel.to_string());
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let mut out = BufWriter::new(File::create(self.root.join(MANIFEST))?);
        serde_json::to_writer_pretty(&mut out, &self.manifest).map_err(std::io::Error::from)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    pub fn finish(mut self, config: BTreeMap<String, String>) -> Result<PathBuf, CliError> {
        self.manifest.config = config;
        self.manifest.status = "complete".into();
        self.manifest.finished_at = Some(now());
        self.write_manifest()?;
        Ok(self.root)
    }
}

pub fn read_manifest(run: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(run.join(MANIFEST))
        .map_err(|e| CliError::Config(format!("no readable manifest in {}: {e}", run.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed manifest in {}: {e}", run.display())))
}

/// CSV float: 12 significant digits.
pub fn f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        format!("{x}")
    }
}

/// Scalar printed on standard output.
pub fn scalar(x: f64) -> String {
    format!("{x:.12}")
}

/// Median, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
