//! Run manifests written next to every output artifact.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: Vec<String>,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_utc: String,
    pub finished_utc: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percentile_method: Option<String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Collects manifest fields while a command runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    m: RunManifest,
}

impl ManifestBuilder {
    /// `config` is any serializable view of the effective settings.
    pub fn start(command_line: Vec<String>, config: &impl Serialize, seed: Option<u64>) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serializes");
        Self {
            m: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command_line,
                config_digest: hex::encode(Sha256::digest(&canonical)),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_utc: now(),
                finished_utc: String::new(),
                percentile_method: None,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.m.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.m.outputs.push(path.display().to_string());
    }

    pub fn percentile_method(&mut self, method: &str) {
        self.m.percentile_method = Some(method.to_string());
    }

    /// Stamps the finish time and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> std::io::Result<RunManifest> {
        self.m.finished_utc = now();
        let text = serde_json::to_string_pretty(&self.m).expect("manifest serializes");
        std::fs::write(path, text + "\n")?;
        Ok(self.m)
    }
}

/// `out.jsonl` gets `out.jsonl.manifest.json`; a directory gets `manifest.json` inside.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
