//! `train`, `evolve` and `gridsearch`.
//!
//! Run directory layout:
//!
//! ```text
//! RUN/config.json              config exactly as given
//! RUN/bp/config.json           effective config (defaults and overrides applied)
//! RUN/bp/metrics.jsonl         one line per epoch
//! RUN/bp/ring/                 last m end-of-epoch checkpoints + ring.json
//! RUN/bp/final.ckpt
//! RUN/bp/summary.json, RUN/bp/manifest.json
//! RUN/de/ (or RUN/de_soup/)    metrics.jsonl, population/, best.ckpt,
//!                              summary.json, manifest.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use nevo::de::{
    grid_search, run_de, seed_population, DeError, FitnessContext, GridResult, Pretrained, SeedSource,
};
use nevo::eval::{evaluate, RunSummary};
use nevo::persist::{
    load_ring, parse_config, save_checkpoint, save_population, save_ring, write_atomic, Checkpoint, CheckpointMeta,
    Config, RunManifest,
};
use nevo::train::{train, TrainError};
use nevo::{NetworkSpec, RngStream};

use crate::common::{load_config, load_splits, model_label, train_bytes, usage, write_json, Jsonl, NumericError, Splits};

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub wall_clock: bool,
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let mut cfg = loaded.config;
    if let Some(s) = a.seed {
        cfg.bp.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.bp.max_epochs = e;
    }
    let spec = cfg.model.spec().map_err(|e| usage(e.to_string()))?;
    let splits = load_splits(&cfg)?;
    run_train(&cfg, &loaded.raw, &spec, &splits, &a.out, a.wall_clock)?;
    Ok(())
}

/// Trains and writes `run/bp`; returns the test accuracy of the final vector.
pub fn run_train(
    cfg: &Config,
    raw_config: &[u8],
    spec: &NetworkSpec,
    splits: &Splits,
    run: &Path,
    wall_clock: bool,
) -> Result<f64> {
    let bp = run.join("bp");
    std::fs::create_dir_all(&bp).with_context(|| format!("creating {}", bp.display()))?;
    write_atomic(&run.join("config.json"), raw_config)?;
    write_atomic(&bp.join("config.json"), cfg.canonical().as_bytes())?;

    let started = Instant::now();
    let mut metrics = Jsonl::create(&bp.join("metrics.jsonl"))?;
    let mut write_err = None;
    let result = train(spec, &splits.train, Some(&splits.test), &cfg.bp, &mut |m| {
        println!(
            "epoch {:>3}  train_loss {:.5}  test_loss {:.5}  test_acc {:.4}",
            m.epoch,
            m.train_loss,
            m.test_loss.unwrap_or(f64::NAN),
            m.test_acc.unwrap_or(f64::NAN)
        );
        if let Err(e) = metrics.write(&m.to_json(wall_clock)) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::NonFinite {
            what,
            epoch,
            step,
            last_good,
        }) => {
            let path = bp.join("last_good.ckpt");
            let meta = CheckpointMeta {
                stage: "bp".into(),
                step: epoch as u64,
                loss: None,
                seed: cfg.bp.seed,
            };
            save_checkpoint(&Checkpoint::new(spec.clone(), *last_good, meta), &path)?;
            return Err(NumericError(format!(
                "non-finite {what} at epoch {epoch}, step {step}; last good parameters saved to {}",
                path.display()
            ))
            .into());
        }
        Err(e @ TrainError::BadGradient) => return Err(NumericError(e.to_string()).into()),
        Err(e) => return Err(e.into()),
    };
    let train_ms = started.elapsed().as_millis() as u64;

    save_ring(&outcome.ring, spec, cfg.bp.seed, &bp.join("ring"))?;
    let last_loss = outcome.history.last().map(|m| m.train_loss);
    let meta = CheckpointMeta {
        stage: "bp".into(),
        step: outcome.history.len() as u64,
        loss: last_loss,
        seed: cfg.bp.seed,
    };
    save_checkpoint(
        &Checkpoint::new(spec.clone(), outcome.final_params.clone(), meta),
        &bp.join("final.ckpt"),
    )?;
    let report = evaluate(spec, &outcome.final_params, &splits.test, cfg.eval.batch_size)?;
    write_json(
        &bp.join("summary.json"),
        &RunSummary {
            model: model_label(cfg),
            dataset: cfg.data.dataset.clone(),
            stage: "adam".into(),
            params: spec.param_count(),
            test_accuracy: report.accuracy,
            test_samples: report.n_samples,
            train_samples: splits.train_samples,
            train_bytes: train_bytes(&splits.train),
        },
    )?;
    let mut artifacts = vec!["config.json".to_string(), "bp/config.json".into(), "bp/metrics.jsonl".into()];
    artifacts.push("bp/ring/ring.json".into());
    for e in outcome.ring.entries() {
        artifacts.push(format!("bp/ring/epoch_{:04}.ckpt", e.epoch));
    }
    artifacts.extend(["bp/final.ckpt".into(), "bp/summary.json".into()]);
    let manifest = RunManifest {
        run_id: run_id(run),
        stage: "bp".into(),
        config_sha256: nevo::data::fetch::sha256_hex(raw_config),
        config: serde_json::to_value(cfg)?,
        datasets: splits.checksums.clone(),
        artifacts,
        timings_ms: BTreeMap::from([("train".to_string(), train_ms)]),
    };
    manifest.write(run, &bp.join("manifest.json"))?;
    println!(
        "trained {} epochs ({:?}); final test accuracy {:.4}; ring epochs {:?}",
        outcome.history.len(),
        outcome.stop,
        report.accuracy,
        outcome.ring.epochs()
    );
    Ok(report.accuracy)
}

fn run_id(run: &Path) -> String {
    run.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

/// The config a run was trained with.
fn run_config(run: &Path) -> Result<Config> {
    let path = run.join("bp").join("config.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn de_error(e: DeError) -> anyhow::Error {
    match e {
        DeError::RingUnderfull { .. } | DeError::TooSmall(_) | DeError::Config(_) | DeError::EmptyAxis(_) => {
            usage(e.to_string())
        }
        other => other.into(),
    }
}

pub struct EvolveArgs {
    pub run: PathBuf,
    pub config: Option<PathBuf>,
    pub soup: bool,
    pub seed: Option<u64>,
    pub generations: Option<usize>,
    pub wall_clock: bool,
}

pub fn cmd_evolve(a: EvolveArgs) -> Result<()> {
    let (mut cfg, raw) = match &a.config {
        Some(p) => {
            let l = load_config(p)?;
            (l.config, l.raw)
        }
        None => {
            let c = run_config(&a.run)?;
            let raw = c.canonical().into_bytes();
            (c, raw)
        }
    };
    if let Some(s) = a.seed {
        cfg.de.seed = s;
    }
    if let Some(g) = a.generations {
        cfg.de.max_generations = g;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (spec, ring) = load_ring(&a.run.join("bp").join("ring"))?;
    let splits = load_splits(&cfg)?;
    let stage = if a.soup { "de_soup" } else { "de" };
    let out = a.run.join(stage);

    let root = RngStream::new(cfg.de.seed);
    let source = if a.soup { SeedSource::Soup(&spec) } else { SeedSource::Ancestors(&ring) };
    let pop = seed_population(source, cfg.de.population, cfg.de.jitter_sigma, &root).map_err(de_error)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let started = Instant::now();
    let mut metrics = Jsonl::create(&out.join("metrics.jsonl"))?;
    let mut write_err = None;
    let outcome = run_de(
        pop,
        &cfg.de,
        |k| FitnessContext::from_dataset(&spec, &splits.train, cfg.de.fitness_subset, k, &root),
        &mut |m, _| {
            if m.gen % 10 == 0 || m.gen == 1 {
                println!(
                    "gen {:>4}  best_fit {:.6}  mean_fit {:.6}  accepts {}",
                    m.gen, m.best_fit, m.mean_fit, m.accepts
                );
            }
            if let Err(e) = metrics.write(&m.to_json(a.wall_clock)) {
                write_err.get_or_insert(e);
            }
        },
    )
    .map_err(de_error)?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if !outcome.best_fitness.is_finite() {
        return Err(NumericError(format!("best fitness is {}", outcome.best_fitness)).into());
    }
    let de_ms = started.elapsed().as_millis() as u64;

    save_population(&outcome.population, &spec, cfg.de.seed, &out.join("population"))?;
    let meta = CheckpointMeta {
        stage: stage.into(),
        step: outcome.population.generation,
        loss: Some(outcome.best_fitness),
        seed: cfg.de.seed,
    };
    save_checkpoint(&Checkpoint::new(spec.clone(), outcome.best.clone(), meta), &out.join("best.ckpt"))?;
    let report = evaluate(&spec, &outcome.best, &splits.test, cfg.eval.batch_size)?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            model: model_label(&cfg),
            dataset: cfg.data.dataset.clone(),
            stage: stage.into(),
            params: spec.param_count(),
            test_accuracy: report.accuracy,
            test_samples: report.n_samples,
            train_samples: splits.train_samples,
            train_bytes: train_bytes(&splits.train),
        },
    )?;
    let mut artifacts = vec![format!("{stage}/metrics.jsonl"), format!("{stage}/population/index.json")];
    artifacts.extend((0..outcome.population.len()).map(|i| format!("{stage}/population/member_{i:03}.ckpt")));
    artifacts.extend([format!("{stage}/best.ckpt"), format!("{stage}/summary.json")]);
    let manifest = RunManifest {
        run_id: run_id(&a.run),
        stage: stage.into(),
        config_sha256: nevo::data::fetch::sha256_hex(&raw),
        config: serde_json::to_value(&cfg)?,
        datasets: splits.checksums.clone(),
        artifacts,
        timings_ms: BTreeMap::from([("evolve".to_string(), de_ms)]),
    };
    manifest.write(&a.run, &out.join("manifest.json"))?;
    println!(
        "evolved {} generations ({:?}); best fitness {:.6} (seed population {:.6}); test accuracy {:.4}",
        outcome.history.len(),
        outcome.stop,
        outcome.best_fitness,
        outcome.initial_best_fitness,
        report.accuracy
    );
    Ok(())
}

pub struct GridArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub runs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub wall_clock: bool,
}

pub fn cmd_gridsearch(a: GridArgs) -> Result<()> {
    let loaded = load_config(&a.config)?;
    let mut cfg = loaded.config;
    if let Some(s) = a.seed {
        cfg.de.seed = s;
    }
    let spec = cfg.model.spec().map_err(|e| usage(e.to_string()))?;
    // Fail on an empty axis before any training starts.
    cfg.grid.cells().map_err(de_error)?;
    let splits = load_splits(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut rings = Vec::new();
    if a.runs.is_empty() {
        for &lr in &cfg.grid.lr {
            let mut c = cfg.clone();
            c.bp.lr = lr;
            let run = a.out.join(format!("lr_{lr}"));
            println!("pretraining with lr {lr} into {}", run.display());
            run_train(&c, &loaded.raw, &spec, &splits, &run, a.wall_clock)?;
            rings.push((lr, load_ring(&run.join("bp").join("ring"))?.1));
        }
    } else {
        for run in &a.runs {
            let c = run_config(run)?;
            let (s, ring) = load_ring(&run.join("bp").join("ring"))?;
            if s != spec {
                return Err(usage(format!("{} was trained with a different architecture", run.display())));
            }
            rings.push((c.bp.lr, ring));
        }
    }
    let pretrained: Vec<Pretrained<'_>> = rings.iter().map(|(lr, ring)| Pretrained { lr: *lr, ring }).collect();
    let mut lines = Jsonl::create(&a.out.join("grid.jsonl"))?;
    let mut write_err = None;
    let results = grid_search(
        &cfg.grid,
        &pretrained,
        &cfg.de,
        &spec,
        &splits.train,
        &splits.test,
        cfg.de.seed,
        &mut |r: &GridResult| {
            println!(
                "cell {:>2}  lr {:<5} F {:<5} Cr {:<5} fitness {:.6} -> {:.6}  test_acc {:.4} (ancestor {:.4})",
                r.cell.index,
                r.cell.lr,
                r.cell.f,
                r.cell.cr,
                r.initial_best_fitness,
                r.best_fitness,
                r.test_accuracy,
                r.ancestor_test_accuracy
            );
            let line = serde_json::to_value(r).expect("grid result serializes");
            if let Err(e) = lines.write(&line) {
                write_err.get_or_insert(e);
            }
        },
    )
    .map_err(|e| match e {
        DeError::MissingPretrained(lr) => usage(format!("no pretrained run for lr {lr}; pass it with --runs")),
        other => de_error(other),
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_json(&a.out.join("grid.json"), &results)?;
    if let Some(best) = results.first() {
        println!(
            "best cell {}: lr {} F {} Cr {} test accuracy {:.4}",
            best.cell.index, best.cell.lr, best.cell.f, best.cell.cr, best.test_accuracy
        );
    }
    Ok(())
}
