use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
}

/// SHA-256 of the compact JSON of `config` with object keys sorted, so the
/// hash ignores field order.
pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key.
    let canonical = serde_json::to_string(config).expect("JSON values serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Wall-clock phase timer; its results go to `timings.json`, which is kept
/// out of the manifest because it differs between runs.
#[derive(Debug, Default)]
pub struct Timings {
    phases: Vec<(String, f64)>,
}

impl Timings {
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.phases.push((phase.to_owned(), t.elapsed().as_secs_f64()));
        out
    }

    pub fn get(&self, phase: &str) -> Option<f64> {
        self.phases.iter().find(|(p, _)| p == phase).map(|(_, s)| *s)
    }
}

pub struct Run {
    pub out: PathBuf,
    outputs: Vec<PathBuf>,
    pub timings: Timings,
}

impl Run {
    pub fn start(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::other(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self { out: out.to_path_buf(), outputs: Vec::new(), timings: Timings::default() })
    }

    /// Path of an output file inside the run directory, recorded in the
    /// manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> Result<(), CliError> {
        for p in &self.outputs {
            if !p.exists() {
                return Err(CliError::other(format!("expected output {} was not written", p.display())));
            }
        }
        let manifest = RunManifest {
            command: std::env::args().skip(1).collect(),
            config_hash: config_hash(&config),
            seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        std::fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let timings: serde_json::Map<String, serde_json::Value> = self
            .timings
            .phases
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect();
        std::fs::write(self.out.join("timings.json"), serde_json::to_string_pretty(&timings)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"c":2.5,"d":[1,2]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":{"d":[1,2],"c":2.5},"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"b":{"d":[1,2],"c":2.6},"a":1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
