use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::commands::Command;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(sdnn::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 usage or config, 2 data or format, 3 runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(sdnn::Error::Config(_)) => 1,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) | CliError::Output { .. } => 3,
        }
    }

    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.into(),
            source,
        }
    }
}

/// Record of one CLI invocation, written to the output directory even when
/// the command fails.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub duration_seconds: f64,
    pub exit_status: u8,
    pub error: Option<String>,
    /// Files written by the command, relative to the output directory.
    pub outputs: Vec<String>,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(command: &Command) -> Self {
        Self {
            command: command.name().to_string(),
            config: None,
            model: None,
            seed: None,
            output_dir: None,
            duration_seconds: 0.0,
            exit_status: 0,
            error: None,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn finish(&mut self, seconds: f64, code: u8, error: Option<&CliError>) {
        self.duration_seconds = seconds;
        self.exit_status = code;
        self.error = error.map(|e| e.to_string());
    }

    /// Writes `manifest.json` via a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        fs::rename(tmp, path)
    }
}
