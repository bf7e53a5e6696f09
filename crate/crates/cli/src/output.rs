use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::error::CliError;

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partially written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

/// Renders CSV records to bytes.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>, CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| CliError::from(e.into_error()))
}

/// Path with `suffix` appended to the file name, e.g. `result.json.manifest.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, enough to replay the run.
    pub argv: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub tool_version: String,
    pub output_paths: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_paths: Vec<PathBuf>, seed: Option<u64>, jobs: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_paths,
            seed,
            jobs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            output_paths: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    /// Stamps the duration and writes the manifest beside the first output.
    pub fn finish(mut self, elapsed: Duration) -> Result<PathBuf, CliError> {
        self.wall_clock_s = elapsed.as_secs_f64();
        let anchor = self
            .output_paths
            .first()
            .cloned()
            .unwrap_or_else(|| PathBuf::from(&self.command));
        let path = sibling(&anchor, ".manifest.json");
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
