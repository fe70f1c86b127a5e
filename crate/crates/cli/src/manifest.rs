use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to every artifact.
///
/// `fingerprint` covers command, parameters, input hashes (by role, not
/// path), tool version and seed; two manifests with the same fingerprint
/// describe the same computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub inputs: BTreeMap<String, InputHash>,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub timestamp: u64,
    pub seed: u64,
    #[serde(default)]
    pub fingerprint: String,
}

impl RunManifest {
    pub fn new(command: &str, parameters: &impl Serialize, seed: u64) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            parameters: serde_json::to_value(parameters)?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: 0,
            seed,
            fingerprint: String::new(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let sha256 = hash_path(path)?;
        self.inputs.insert(role.to_string(), InputHash { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn compute_fingerprint(&self) -> String {
        let inputs: BTreeMap<&str, &str> = self.inputs.iter().map(|(k, v)| (k.as_str(), v.sha256.as_str())).collect();
        let key = serde_json::json!({
            "command": self.command,
            "parameters": self.parameters,
            "inputs": inputs,
            "tool_version": self.tool_version,
            "seed": self.seed,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    /// Hashes `outputs`, stamps the manifest and writes it to `manifest_path`.
    pub fn finish(mut self, outputs: &[PathBuf], manifest_path: &Path) -> CliResult<Self> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        for out in outputs {
            let key = out.strip_prefix(base).unwrap_or(out).to_string_lossy().into_owned();
            self.outputs.insert(key, hash_path(out)?);
        }
        self.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.fingerprint = self.compute_fingerprint();
        if let Some(dir) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(manifest_path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::File { path: path.into(), source: e.into() })
    }

    /// True when `existing` records the same computation and its outputs
    /// are still on disk unchanged.
    pub fn is_satisfied_by(&self, existing: &RunManifest, manifest_path: &Path) -> bool {
        if existing.fingerprint != self.compute_fingerprint() || existing.outputs.is_empty() {
            return false;
        }
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        existing.outputs.iter().all(|(rel, sha)| {
            let p = Path::new(rel);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            hash_path(&p).map(|h| &h == sha).unwrap_or(false)
        })
    }
}

/// Conventional manifest location for a file artifact.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// SHA-256 of a file, or of a directory tree (sorted relative names and file
/// digests; manifests inside are ignored).
pub fn hash_path(path: &Path) -> CliResult<String> {
    let meta = fs::metadata(path).map_err(|e| CliError::File { path: path.into(), source: e.into() })?;
    if meta.is_file() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(hash_file(&path.join(&rel))?.as_bytes());
        h.update(*b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let p = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(root, &p, out)?;
        } else if entry.file_name() != MANIFEST_FILE {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn hash_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::File { path: path.into(), source: e.into() })?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
