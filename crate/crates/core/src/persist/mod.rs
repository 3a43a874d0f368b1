//! Checkpoints, population and ring directories, configuration and run
//! manifests.
//!
//! Every file is written to a temporary sibling and renamed into place, so
//! readers only ever see complete files.

mod checkpoint;
mod config;
mod manifest;
mod population;

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::network::NetworkError;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION,
    HEADER_LEN, MAGIC,
};
pub use config::{parse_config, Config, ConfigError, DataSection, EvalSection, ModelSection};
pub use manifest::{DatasetChecksum, RunManifest};
pub use population::{load_population, load_ring, save_population, save_ring, INDEX_FILE, RING_FILE};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    VersionTooNew { found: u16, supported: u16 },
    #[error("checkpoint format version {0} is not supported")]
    BadVersion(u16),
    #[error("unsupported parameter dtype tag {0}")]
    Dtype(u8),
    #[error("checkpoint length {found} does not match the {expected} bytes its header declares")]
    Length { expected: u64, found: u64 },
    #[error("checkpoint header declares impossible sizes")]
    Overflow,
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("embedded spec is invalid: {0}")]
    Spec(NetworkError),
    #[error("checkpoint holds {file} parameters but its spec needs {spec}")]
    SpecLength { file: u64, spec: usize },
    #[error("checkpoint metadata: {0}")]
    Meta(serde_json::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("member {index} ({file}) is missing")]
    MissingMember { index: usize, file: String },
    #[error("member {index} does not share the spec of member 0")]
    MemberSpec { index: usize },
    #[error("{0} lists no members")]
    EmptyIndex(PathBuf),
    #[error("population: {0}")]
    Population(#[from] crate::de::DeError),
    #[error("ring entries must have increasing epochs")]
    RingOrder,
    #[error("manifest lists {0} but it does not exist")]
    MissingArtifact(PathBuf),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PersistError::Json {
        path: path.to_path_buf(),
        source,
    })
}
