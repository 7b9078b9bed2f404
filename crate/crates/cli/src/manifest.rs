use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ucan_core::Error> for Failure {
    fn from(e: ucan_core::Error) -> Self {
        use ucan_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(_) | E::Format(_) => Failure::Io(msg),
            E::Numeric(_) => Failure::Numeric(msg),
            E::Dimension(_) | E::Config(_) | E::Contract(_) => Failure::Usage(msg),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn io_err(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a command's outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    /// Records every `key = value` line of a flat config text.
    pub fn set_config_text(&mut self, prefix: &str, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("{prefix}{}", k.trim()), v.trim());
            }
        }
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> CmdResult {
        fs::write(path, bytes).map_err(|e| io_err(path, e))?;
        self.outputs.push(OutputFile {
            path: path
                .file_name()
                .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> CmdResult {
        let json = serde_json::to_string_pretty(self).map_err(|e| io_err(path, e))?;
        fs::write(path, json + "\n").map_err(|e| io_err(path, e))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir.to_path_buf())
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_hash_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("t", 0);
        m.write_output(&dir.path().join("a.txt"), b"abc").unwrap();
        assert_eq!(
            m.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sidecar(Path::new("/x/w.bin")), Path::new("/x/w.bin.manifest.json"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::from(ucan_core::Error::Format("x".into())).code(), 3);
        assert_eq!(Failure::from(ucan_core::Error::Numeric("x".into())).code(), 4);
        assert_eq!(Failure::from(ucan_core::Error::Config("x".into())).code(), 2);
    }
}
