//! Checksummed download cache for the IDX datasets.
//!
//! Each file is fetched as `{base_url}{file}.gz`, verified against the pinned
//! SHA-256 of the compressed file, then inflated next to it. Files that fail
//! verification are moved to `quarantine/` and reported. `file://` base URLs
//! are read from disk, which keeps tests and air-gapped mirrors simple.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, DataError};

const BUILTIN: &str = include_str!("../../assets/datasets.json");
const ATTEMPTS: u32 = 3;
const LOCK_STALE: Duration = Duration::from_secs(600);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dataset: String,
    pub file: String,
    /// Digest of the `.gz` as served.
    pub gz_sha256: String,
    /// Digest of the inflated file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_urls: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN).expect("bundled manifest parses")
    }

    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            what: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn for_dataset(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.dataset == name).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FetchReport {
    /// Inflated IDX files, in manifest order.
    pub files: Vec<PathBuf>,
    /// Network (or `file://`) reads issued, including retries.
    pub requests: u32,
    pub downloaded: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(io_err(path))?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Exclusive per-file lock held for the duration of one fetch.
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self, DataError> {
        loop {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self(path)),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let stale = fs::metadata(&path)
                        .and_then(|m| m.modified())
                        .ok()
                        .and_then(|t| SystemTime::now().duration_since(t).ok())
                        .is_some_and(|age| age > LOCK_STALE);
                    if stale {
                        let _ = fs::remove_file(&path);
                    } else {
                        std::thread::sleep(Duration::from_millis(100));
                    }
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn quarantine(out_dir: &Path, path: &Path, expected: &str, actual: String) -> DataError {
    let qdir = out_dir.join("quarantine");
    let name = path.file_name().map(|n| n.to_owned()).unwrap_or_default();
    let target = qdir.join(&name);
    let moved = fs::create_dir_all(&qdir).and_then(|_| fs::rename(path, &target));
    DataError::Checksum {
        file: name.to_string_lossy().into_owned(),
        expected: expected.into(),
        actual,
        quarantined: if moved.is_ok() { target } else { path.to_path_buf() },
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn get(url: &str, requests: &mut u32) -> Result<Vec<u8>, DataError> {
    let mut last = String::new();
    for attempt in 1..=ATTEMPTS {
        *requests += 1;
        let result = if let Some(path) = url.strip_prefix("file://") {
            fs::read(path).map_err(|e| e.to_string())
        } else {
            ureq::get(url)
                .call()
                .map_err(|e| e.to_string())
                .and_then(|resp| {
                    let mut buf = Vec::new();
                    resp.into_body()
                        .into_reader()
                        .read_to_end(&mut buf)
                        .map(|_| buf)
                        .map_err(|e| e.to_string())
                })
        };
        match result {
            Ok(bytes) => return Ok(bytes),
            Err(e) => last = e,
        }
        if attempt < ATTEMPTS {
            std::thread::sleep(Duration::from_millis(200 * attempt as u64));
        }
    }
    Err(DataError::Http {
        url: url.into(),
        attempts: ATTEMPTS,
        reason: last,
    })
}

fn inflate(gz: &[u8], what: &Path) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(gz)
        .read_to_end(&mut out)
        .map_err(|e| DataError::Malformed {
            what: what.display().to_string(),
            reason: format!("gzip: {e}"),
        })?;
    Ok(out)
}

fn fetch_one(
    entry: &ManifestEntry,
    base_url: &str,
    out_dir: &Path,
    report: &mut FetchReport,
) -> Result<PathBuf, DataError> {
    let raw = out_dir.join(&entry.file);
    let gz = out_dir.join(format!("{}.gz", entry.file));
    let _lock = LockGuard::acquire(out_dir.join(format!("{}.lock", entry.file)))?;

    if raw.exists() {
        if let Some(want) = &entry.sha256 {
            let got = sha256_file(&raw)?;
            if &got == want {
                return Ok(raw);
            }
            return Err(quarantine(out_dir, &raw, want, got));
        }
    }
    if gz.exists() {
        let bytes = fs::read(&gz).map_err(io_err(&gz))?;
        let got = sha256_hex(&bytes);
        if got != entry.gz_sha256 {
            return Err(quarantine(out_dir, &gz, &entry.gz_sha256, got));
        }
        if !raw.exists() {
            write_atomic(&raw, &inflate(&bytes, &gz)?)?;
        }
        return Ok(raw);
    }

    let url = format!("{base_url}{}.gz", entry.file);
    let bytes = get(&url, &mut report.requests)?;
    let got = sha256_hex(&bytes);
    if got != entry.gz_sha256 {
        let partial = out_dir.join(format!("{}.gz.part", entry.file));
        fs::write(&partial, &bytes).map_err(io_err(&partial))?;
        return Err(quarantine(out_dir, &partial, &entry.gz_sha256, got));
    }
    let inflated = inflate(&bytes, &gz)?;
    if let Some(want) = &entry.sha256 {
        let got = sha256_hex(&inflated);
        if &got != want {
            let partial = out_dir.join(format!("{}.part", entry.file));
            fs::write(&partial, &inflated).map_err(io_err(&partial))?;
            return Err(quarantine(out_dir, &partial, want, got));
        }
    }
    write_atomic(&gz, &bytes)?;
    write_atomic(&raw, &inflated)?;
    report.downloaded.push(entry.file.clone());
    Ok(raw)
}

/// Makes the four IDX files of `name` available in `out_dir`.
///
/// A warm cache is verified locally and issues no requests.
pub fn fetch(
    name: &str,
    base_url: Option<&str>,
    out_dir: &Path,
    manifest: &Manifest,
) -> Result<FetchReport, DataError> {
    let entries = manifest.for_dataset(name);
    if entries.is_empty() {
        return Err(DataError::UnknownDataset(name.into()));
    }
    let base = match base_url {
        Some(b) => b.to_string(),
        None => manifest
            .base_urls
            .get(name)
            .cloned()
            .ok_or_else(|| DataError::UnknownDataset(name.into()))?,
    };
    let base = if base.ends_with('/') { base } else { format!("{base}/") };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut report = FetchReport::default();
    for e in entries {
        let path = fetch_one(e, &base, out_dir, &mut report)?;
        report.files.push(path);
    }
    Ok(report)
}
