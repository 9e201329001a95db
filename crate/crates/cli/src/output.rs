//! Output files.
//!
//! Every file name carries the first 12 hex digits of the configuration
//! digest, so files from different configurations cannot be mixed up
//! silently. CSV files have a header row, UTF-8 text and `\n` line endings;
//! apart from the manifest's `created_unix_secs` field, every byte is a
//! function of the configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;

pub const DIGEST_PREFIX: usize = 12;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Writes files named `<kind>-<digest prefix>.<ext>` into one directory and
/// remembers what it wrote.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    digest: String,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path, digest: &str) -> Result<Self, OutputError> {
        fs::create_dir_all(dir).map_err(|source| OutputError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            digest: digest.to_string(),
            written: Vec::new(),
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn path(&self, kind: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{kind}-{}.{ext}", &self.digest[..DIGEST_PREFIX]))
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `rows` under a header derived from the row type's fields.
    pub fn csv<T: Serialize>(&mut self, kind: &str, rows: &[T]) -> Result<PathBuf, OutputError> {
        self.csv_with_header(kind, None, rows)
    }

    /// Like [`OutputSet::csv`] but with an explicit header, for row types
    /// that are tuples.
    pub fn csv_with_header<T: Serialize>(
        &mut self,
        kind: &str,
        header: Option<&[&str]>,
        rows: &[T],
    ) -> Result<PathBuf, OutputError> {
        let path = self.path(kind, "csv");
        let csv_err = |source| OutputError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .has_headers(header.is_none())
            .from_path(&path)
            .map_err(csv_err)?;
        if let Some(h) = header {
            w.write_record(h).map_err(csv_err)?;
        }
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|source| OutputError::Io {
            path: path.clone(),
            source,
        })?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, kind: &str, value: &T) -> Result<PathBuf, OutputError> {
        let path = self.path(kind, "json");
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| OutputError::Io {
            path: path.clone(),
            source,
        })?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Writes the run manifest, listing every file written so far.
    pub fn manifest(
        &mut self,
        command: &str,
        config: &RunConfig,
        details: serde_json::Value,
    ) -> Result<PathBuf, OutputError> {
        let outputs: Vec<String> = self
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        let digest = self.digest.clone();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_digest: &digest,
            master_seed: config.master_seed,
            hyperparameters: config,
            details,
            outputs,
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        self.json(&format!("{command}-manifest"), &manifest)
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_digest: &'a str,
    master_seed: u64,
    hyperparameters: &'a RunConfig,
    /// Command-specific seeds and results.
    details: serde_json::Value,
    outputs: Vec<String>,
    /// The only field that differs between identical runs.
    created_unix_secs: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        iter: u64,
        tau_meta: f64,
    }

    #[test]
    fn csv_has_header_and_unix_newlines() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::new(dir.path(), &"ab".repeat(32)).unwrap();
        let path = out
            .csv(
                "history",
                &[
                    Row { iter: 1, tau_meta: 0.5 },
                    Row {
                        iter: 2,
                        tau_meta: 0.25,
                    },
                ],
            )
            .unwrap();
        assert_eq!(path.file_name().unwrap(), "history-abababababab.csv");
        assert_eq!(fs::read_to_string(&path).unwrap(), "iter,tau_meta\n1,0.5\n2,0.25\n");
        let p = out.csv_with_header("sweep", Some(&["a", "b"]), &[(1.0, 2.0)]).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "a,b\n1.0,2.0\n");
        assert_eq!(out.written().len(), 2);
    }
}
