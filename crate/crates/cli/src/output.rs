use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Collects the files written by one run so the manifest can list them.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Comma-separated, LF-terminated, header first. Floats use the shortest
    /// representation that reads back to the same value.
    pub fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator,
        R::Item: AsRef<[u8]>,
    {
        let path = self.root.join(name);
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(io)?;
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.root.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

/// JSON has no infinities; unresolved quantities become null.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seed_overridden: bool,
    pub threads: usize,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

#[derive(Serialize)]
pub struct Versions {
    pub chargenoise: &'static str,
    pub chargenoise_cli: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            chargenoise: chargenoise::VERSION,
            chargenoise_cli: env!("CARGO_PKG_VERSION"),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
