//! `fetch`, `eval`, `corrupt` and `report`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nevo::data::corrupt::{corrupt, CorruptionKind};
use nevo::data::fetch::{fetch, Manifest};
use nevo::data::npy::{read_npy, to_nchw, write_npy, NpyArray, NpyData};
use nevo::data::{load_split, DataError, Dataset};
use nevo::eval::{evaluate, mce, report, ReportFormat};
use nevo::persist::load_checkpoint;
use nevo::rng::{tag, RngStream};

use crate::common::{dataset_dir, usage, write_json};

pub fn cmd_fetch(dataset: &str, out: Option<PathBuf>, base_url: Option<String>, manifest: Option<PathBuf>) -> Result<()> {
    let manifest = match manifest {
        Some(p) => Manifest::from_path(&p)?,
        None => Manifest::builtin(),
    };
    if manifest.for_dataset(dataset).is_empty() {
        return Err(usage(format!("no manifest entries for dataset '{dataset}'")));
    }
    let out = dataset_dir(dataset, out.as_deref());
    let r = fetch(dataset, base_url.as_deref(), &out, &manifest)?;
    println!(
        "{dataset}: {} files in {} ({} downloaded, {} requests)",
        r.files.len(),
        out.display(),
        r.downloaded.len(),
        r.requests
    );
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub corrupted: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub batch_size: usize,
}

/// Reads one MNIST-C style corruption directory.
fn load_corrupted(dir: &Path, num_classes: usize) -> Result<Dataset, DataError> {
    let images = to_nchw(read_npy(&dir.join("test_images.npy"))?.to_tensor()?)?;
    let raw = read_npy(&dir.join("test_labels.npy"))?.to_labels()?;
    let mut labels = Vec::with_capacity(raw.len());
    for (index, &l) in raw.iter().enumerate() {
        if l < 0 || l as usize >= num_classes {
            return Err(DataError::Label {
                index,
                label: l,
                classes: num_classes,
            });
        }
        labels.push(l as usize);
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, images, labels, num_classes)
}

fn baseline_errors(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading baseline {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let rows = v["corrupted"]
        .as_array()
        .ok_or_else(|| usage(format!("{}: no 'corrupted' list; pass the JSON output of an earlier eval", path.display())))?;
    rows.iter()
        .map(|r| {
            let name = r["corruption"].as_str().map(str::to_string);
            let err = r["error"].as_f64();
            name.zip(err)
                .ok_or_else(|| usage(format!("{}: malformed corruption row {r}", path.display())))
        })
        .collect()
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.dataset.is_none() && a.corrupted.is_none() {
        return Err(usage("eval needs --dataset, --corrupted, or both"));
    }
    if a.baseline.is_some() && a.corrupted.is_none() {
        return Err(usage("--baseline only applies with --corrupted"));
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let mut doc = serde_json::json!({ "checkpoint": a.ckpt.display().to_string() });

    if let Some(name) = &a.dataset {
        let dir = dataset_dir(name, a.data_dir.as_deref());
        let test = load_split(name, &dir, false)?;
        let r = evaluate(&ckpt.spec, &ckpt.params, &test, a.batch_size)?;
        println!("{}: accuracy {:.4} ({} / {}), loss {:.5}", r.dataset, r.accuracy, r.correct, r.n_samples, r.mean_loss);
        doc["clean"] = serde_json::to_value(&r)?;
    }
    if let Some(root) = &a.corrupted {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .with_context(|| format!("listing {}", root.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("test_images.npy").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(DataError::Malformed {
                what: root.display().to_string(),
                reason: "no <corruption>/test_images.npy directories".into(),
            }
            .into());
        }
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        for dir in &dirs {
            let data = load_corrupted(dir, ckpt.spec.num_classes())?;
            let r = evaluate(&ckpt.spec, &ckpt.params, &data, a.batch_size)?;
            println!("{:<16} error {:.4}", r.dataset, r.error);
            errors.push((r.dataset.clone(), r.error));
            rows.push(serde_json::json!({
                "corruption": r.dataset,
                "error": r.error,
                "accuracy": r.accuracy,
                "n_samples": r.n_samples,
            }));
        }
        doc["corrupted"] = serde_json::Value::Array(rows);
        if let Some(b) = &a.baseline {
            let table = mce(&errors, &baseline_errors(b)?)?;
            for (c, v) in &table.rows {
                println!("{c:<16} mCE {v:.1}%");
            }
            println!("average mCE {:.1}%", table.average);
            doc["mce"] = serde_json::to_value(&table)?;
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &doc)?;
    }
    Ok(())
}

pub struct CorruptArgs {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub kind: String,
    pub severity: u8,
    pub out: PathBuf,
    pub seed: u64,
    pub limit: Option<usize>,
}

/// `[N, C, H, W]` in `[0, 1]` to `u8` `[N, H, W, C]`.
fn to_nhwc_u8(data: &Dataset) -> NpyArray {
    let s = data.images().shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = data.images().data();
    let mut out = vec![0u8; src.len()];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = src[((i * c + ch) * h + y) * w + x];
                    out[((i * h + y) * w + x) * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    NpyArray {
        shape: vec![n, h, w, c],
        data: NpyData::U8(out),
    }
}

pub fn cmd_corrupt(a: CorruptArgs) -> Result<()> {
    let kinds: Vec<CorruptionKind> = if a.kind == "all" {
        CorruptionKind::ALL.to_vec()
    } else {
        vec![a.kind.parse().map_err(|e: DataError| usage(e.to_string()))?]
    };
    if !(1..=5).contains(&a.severity) {
        return Err(usage("--severity must be in 1..=5"));
    }
    let dir = dataset_dir(&a.dataset, a.data_dir.as_deref());
    let mut test = load_split(&a.dataset, &dir, false)?;
    if let Some(n) = a.limit {
        test = test.head(n)?;
    }
    let root = RngStream::new(a.seed);
    for kind in kinds {
        let k = CorruptionKind::ALL.iter().position(|x| *x == kind).expect("listed kind") as u64;
        let out = corrupt(&test, kind, a.severity, &root.derive(&[tag::CORRUPT, k]))?;
        let kdir = a.out.join(kind.name());
        std::fs::create_dir_all(&kdir).with_context(|| format!("creating {}", kdir.display()))?;
        write_npy(&kdir.join("test_images.npy"), &to_nhwc_u8(&out))?;
        let labels = out.labels().iter().map(|&l| l as u8).collect();
        write_npy(
            &kdir.join("test_labels.npy"),
            &NpyArray {
                shape: vec![out.len()],
                data: NpyData::U8(labels),
            },
        )?;
        println!("{}: {} images at severity {} in {}", kind.name(), out.len(), a.severity, kdir.display());
    }
    Ok(())
}

pub fn cmd_report(runs: &[PathBuf], format: &str, out: Option<PathBuf>) -> Result<()> {
    let fmt = match format {
        "csv" => ReportFormat::Csv,
        "json" => ReportFormat::Json,
        other => return Err(usage(format!("unknown format '{other}' (csv or json)"))),
    };
    let (text, problems) = report(runs, fmt);
    for p in &problems {
        eprintln!("warning: {p}");
    }
    match out {
        Some(path) => nevo::persist::write_atomic(&path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
