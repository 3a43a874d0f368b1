//! Per-stage record of what a run consumed and produced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_json, PersistError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: String,
    /// SHA-256 of the config bytes exactly as given.
    pub config_sha256: String,
    /// Config with every default filled in.
    pub config: serde_json::Value,
    pub datasets: Vec<DatasetChecksum>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// Milliseconds per named phase. Always real timings, even when
    /// metrics streams suppress wall-clock fields.
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    /// Writes `path` after checking that every artifact exists under `run_dir`.
    pub fn write(&self, run_dir: &Path, path: &Path) -> Result<(), PersistError> {
        for a in &self.artifacts {
            let p = run_dir.join(a);
            if !p.exists() {
                return Err(PersistError::MissingArtifact(p));
            }
        }
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, PersistError> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(artifacts: Vec<String>) -> RunManifest {
        RunManifest {
            run_id: "r1".into(),
            stage: "bp".into(),
            config_sha256: crate::data::fetch::sha256_hex(b"{}"),
            config: serde_json::json!({}),
            datasets: vec![DatasetChecksum {
                file: "train-images-idx3-ubyte".into(),
                sha256: "00".into(),
            }],
            artifacts,
            timings_ms: BTreeMap::from([("train".to_string(), 12)]),
        }
    }

    #[test]
    fn round_trip_and_artifact_check() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("final.ckpt"), b"x").unwrap();
        let m = manifest(vec!["final.ckpt".into()]);
        let path = dir.path().join("manifest.json");
        m.write(dir.path(), &path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);

        let bad = manifest(vec!["missing.ckpt".into()]);
        assert!(matches!(bad.write(dir.path(), &path), Err(PersistError::MissingArtifact(_))));
    }
}
