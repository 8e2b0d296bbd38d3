use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    /// First 16 hex digits of the SHA-256 of the command's arguments as JSON.
    pub config_hash: String,
}

impl Meta {
    pub fn new<A: Serialize>(command: &'static str, seed: Option<u64>, args: &A) -> Result<Self> {
        let bytes = serde_json::to_vec(args)?;
        let digest = Sha256::digest(&bytes);
        Ok(Self {
            tool: "slalom",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: hex::encode(&digest[..8]),
        })
    }

    pub fn csv_header(&self) -> String {
        let seed = self
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# {} {} command={} seed={} config={}\n",
            self.tool, self.version, self.command, seed, self.config_hash
        )
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes to `path`, or to stdout when absent.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, contents).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
