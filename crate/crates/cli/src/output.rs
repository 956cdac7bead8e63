//! Artifact directory with a checksummed manifest.

use std::path::{Path, PathBuf};

use opal_surrogate::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    config_sha256: Option<&'a str>,
    inputs: &'a [(String, String)],
    files: &'a [FileEntry],
}

/// Collects written files so the manifest can list them in write order.
pub struct OutDir {
    root: PathBuf,
    files: Vec<FileEntry>,
    inputs: Vec<(String, String)>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        std::fs::write(self.root.join(name), bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records the checksum of a file read by the command.
    pub fn record_input(&mut self, label: &str, bytes: &[u8]) {
        self.inputs.push((label.to_string(), sha256_hex(bytes)));
    }

    pub fn finish(self, command: &str, seed: Option<u64>, config_sha256: Option<&str>) -> Result<()> {
        let manifest = Manifest {
            command,
            seed,
            config_sha256,
            inputs: &self.inputs,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }
}
