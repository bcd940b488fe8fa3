//! Run manifests: which config produced which files, and when.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved config as written into the run directory.
    pub config_path: PathBuf,
    pub config_sha256: String,
    /// Config file given on the command line, if any.
    pub source_config: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub finished: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

impl RunManifest {
    /// Builds a manifest for files that already exist; the config hash is
    /// taken from the file at `config_path`.
    pub fn new(
        command: &str,
        config_path: &Path,
        source_config: Option<&Path>,
        artifacts: Vec<PathBuf>,
        started: SystemTime,
    ) -> Result<Self> {
        let text = std::fs::read(config_path).map_err(|e| Error::io(config_path, e))?;
        let m = Self {
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            config_sha256: sha256_hex(&text),
            source_config: source_config.map(Path::to_path_buf),
            artifacts,
            started: timestamp(started),
            finished: timestamp(SystemTime::now()),
        };
        m.verify()?;
        Ok(m)
    }

    /// Checks that the config hash matches and every artifact exists.
    pub fn verify(&self) -> Result<()> {
        let text = std::fs::read(&self.config_path).map_err(|e| Error::io(&self.config_path, e))?;
        if sha256_hex(&text) != self.config_sha256 {
            return Err(Error::Config(format!(
                "{} does not match the recorded hash",
                self.config_path.display()
            )));
        }
        for a in &self.artifacts {
            if !a.exists() {
                return Err(Error::io(
                    a,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "artifact missing"),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
