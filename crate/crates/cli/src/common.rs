//! Pieces shared by the subcommands: cache location, config and data
//! loading, metric streams, error classes that pick the exit code.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nevo::data::augment::augment;
use nevo::data::fetch::sha256_file;
use nevo::data::{load_split, split_files, Dataset};
use nevo::persist::{parse_config, Config, DatasetChecksum};
use nevo::rng::{tag, RngStream};

/// Bad flags or configuration; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Non-finite numbers during training or evolution; exit code 3.
#[derive(Debug)]
pub struct NumericError(pub String);

impl std::fmt::Display for NumericError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `$NEVO_CACHE`, else `~/.cache/nevo`.
pub fn cache_dir() -> PathBuf {
    if let Some(p) = std::env::var_os("NEVO_CACHE") {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("nevo")
}

pub fn dataset_dir(name: &str, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cache_dir().join(name))
}

/// Raw bytes plus the parsed config.
pub struct LoadedConfig {
    pub raw: Vec<u8>,
    pub config: Config,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let text = std::str::from_utf8(&raw).map_err(|e| usage(format!("{}: not UTF-8: {e}", path.display())))?;
    let config = parse_config(text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig { raw, config })
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub checksums: Vec<DatasetChecksum>,
    /// Raw training samples before augmentation.
    pub train_samples: usize,
}

/// Loads, subsets and augments the configured dataset.
pub fn load_splits(cfg: &Config) -> Result<Splits> {
    let name = cfg.data.dataset.as_str();
    let dir = dataset_dir(name, cfg.data.dir.as_deref());
    let mut checksums = Vec::new();
    for train in [true, false] {
        for f in split_files(name, &dir, train)? {
            let sha256 = sha256_file(&f)?;
            checksums.push(DatasetChecksum {
                file: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                sha256,
            });
        }
    }
    let mut train = load_split(name, &dir, true).with_context(|| format!("loading {name} from {}", dir.display()))?;
    let mut test = load_split(name, &dir, false).with_context(|| format!("loading {name} from {}", dir.display()))?;
    let rng = RngStream::new(cfg.data.seed);
    if let Some(n) = cfg.data.train_subset {
        train = train.subset(n, &rng.derive(&[tag::SUBSET, u64::MAX]))?;
    }
    if let Some(n) = cfg.data.test_subset {
        test = test.subset(n, &rng.derive(&[tag::SUBSET, u64::MAX - 1]))?;
    }
    let train_samples = train.len();
    if cfg.data.augment_multiplier > 1 {
        train = augment(&train, cfg.data.augment_multiplier, &cfg.data.augment, &rng.child(tag::AUGMENT))?;
    }
    Ok(Splits {
        train,
        test,
        checksums,
        train_samples,
    })
}

/// Bytes of the training images at one byte per pixel.
pub fn train_bytes(data: &Dataset) -> u64 {
    data.images().len() as u64
}

/// Model label for summaries: the zoo name or the spec file stem.
pub fn model_label(cfg: &Config) -> String {
    match &cfg.model.spec_file {
        Some(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        None => cfg.model.name.clone(),
    }
}

/// Line-delimited JSON metrics file.
pub struct Jsonl {
    out: BufWriter<File>,
}

impl Jsonl {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    nevo::persist::write_atomic(path, text.as_bytes())?;
    Ok(())
}
