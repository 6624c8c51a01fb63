//! Reproducibility manifests.
//!
//! Every artifact the CLI writes carries a manifest describing the
//! invocation that produced it, plus a content hash of that manifest with
//! the wall clock zeroed out. Rerunning a command with the same inputs
//! therefore reproduces every output byte except the timestamp fields, and
//! artifacts can be traced back to the exact settings that made them.

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// Subcommand plus the arguments that shaped the run.
    pub command: String,
    /// Configuration files consulted, in read order.
    pub configs: Vec<String>,
    /// Seed governing any randomness, when one applies.
    pub seed: Option<u64>,
    /// Build identity: `git describe` of the source tree when available.
    pub build: String,
    /// Artifacts this invocation writes.
    pub outputs: Vec<String>,
    /// Effective settings after flag > config file > default precedence.
    pub effective: Value,
    /// Unix seconds at invocation. Excluded from the hash.
    pub wall_clock_s: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        RunManifest {
            command: command.into(),
            configs: Vec::new(),
            seed: None,
            build: build_describe(),
            outputs: Vec::new(),
            effective: Value::Null,
            wall_clock_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn config(&mut self, path: &Path) -> &mut Self {
        self.configs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Hash over everything except the wall clock, so identical reruns
    /// produce the identical hash.
    pub fn hash(&self) -> String {
        let mut stable = serde_json::to_value(self).expect("manifest serializes");
        stable["wall_clock_s"] = json!(0);
        let bytes = serde_json::to_vec(&stable).expect("manifest serializes");
        sha256_hex(&bytes)
    }

    /// Manifest as a JSON value with its hash folded in, ready to embed.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        v["hash"] = json!(self.hash());
        v
    }

    /// Wraps a payload under a stable key next to the manifest.
    pub fn wrap(&self, key: &str, payload: Value) -> Value {
        json!({ "manifest": self.to_value(), key: payload })
    }

    /// Comment lines prefixed to CSV artifacts.
    pub fn csv_preamble(&self) -> String {
        format!("# manifest_hash={}\n# wall_clock_s={}\n", self.hash(), self.wall_clock_s)
    }
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn build_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unreleased".to_string())
}
