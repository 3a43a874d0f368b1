//! Directories of member checkpoints plus a JSON index.
//!
//! A population directory holds `member_NNN.ckpt` files and `index.json`
//! with the generation counter and cached fitness (`null` marks a stale
//! entry). A ring directory holds `epoch_NNNN.ckpt` files and `ring.json`.
//! The index is written last, so a directory with an index is complete.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use super::{read_json, write_json, PersistError};
use crate::de::Population;
use crate::network::NetworkSpec;
use crate::train::{CheckpointRing, RingEntry};

pub const INDEX_FILE: &str = "index.json";
pub const RING_FILE: &str = "ring.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberEntry {
    file: String,
    fitness: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationIndex {
    generation: u64,
    members: Vec<MemberEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RingIndexEntry {
    epoch: usize,
    file: String,
    train_loss: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RingIndex {
    capacity: usize,
    entries: Vec<RingIndexEntry>,
}

pub fn save_population(pop: &Population, spec: &NetworkSpec, seed: u64, dir: &Path) -> Result<(), PersistError> {
    let mut members = Vec::with_capacity(pop.len());
    for (i, (p, &f)) in pop.members.iter().zip(&pop.fitness).enumerate() {
        let file = format!("member_{i:03}.ckpt");
        let meta = CheckpointMeta {
            stage: "de".into(),
            step: pop.generation,
            loss: (!f.is_nan()).then_some(f),
            seed,
        };
        save_checkpoint(&Checkpoint::new(spec.clone(), p.clone(), meta), &dir.join(&file))?;
        members.push(MemberEntry {
            file,
            fitness: (!f.is_nan()).then_some(f),
        });
    }
    write_json(
        &dir.join(INDEX_FILE),
        &PopulationIndex {
            generation: pop.generation,
            members,
        },
    )
}

fn load_members<'a>(
    dir: &Path,
    files: impl Iterator<Item = &'a str>,
) -> Result<(NetworkSpec, Vec<Checkpoint>), PersistError> {
    let mut out: Vec<Checkpoint> = Vec::new();
    for (index, file) in files.enumerate() {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(PersistError::MissingMember {
                index,
                file: file.to_string(),
            });
        }
        let c = load_checkpoint(&path)?;
        if let Some(first) = out.first() {
            if c.spec != first.spec {
                return Err(PersistError::MemberSpec { index });
            }
        }
        out.push(c);
    }
    let spec = out
        .first()
        .map(|c| c.spec.clone())
        .ok_or_else(|| PersistError::EmptyIndex(dir.to_path_buf()))?;
    Ok((spec, out))
}

pub fn load_population(dir: &Path) -> Result<(NetworkSpec, Population), PersistError> {
    let index: PopulationIndex = read_json(&dir.join(INDEX_FILE))?;
    let (spec, members) = load_members(dir, index.members.iter().map(|m| m.file.as_str()))?;
    let mut pop = Population::new(members.into_iter().map(|c| c.params).collect())?;
    pop.generation = index.generation;
    pop.fitness = index.members.iter().map(|m| m.fitness.unwrap_or(f64::NAN)).collect();
    Ok((spec, pop))
}

pub fn save_ring(ring: &CheckpointRing, spec: &NetworkSpec, seed: u64, dir: &Path) -> Result<(), PersistError> {
    let mut entries = Vec::with_capacity(ring.len());
    for e in ring.entries() {
        let file = format!("epoch_{:04}.ckpt", e.epoch);
        let meta = CheckpointMeta {
            stage: "bp".into(),
            step: e.epoch as u64,
            loss: Some(e.train_loss),
            seed,
        };
        save_checkpoint(&Checkpoint::new(spec.clone(), e.params.clone(), meta), &dir.join(&file))?;
        entries.push(RingIndexEntry {
            epoch: e.epoch,
            file,
            train_loss: e.train_loss,
        });
    }
    write_json(
        &dir.join(RING_FILE),
        &RingIndex {
            capacity: ring.capacity(),
            entries,
        },
    )
}

pub fn load_ring(dir: &Path) -> Result<(NetworkSpec, CheckpointRing), PersistError> {
    let index: RingIndex = read_json(&dir.join(RING_FILE))?;
    if index.entries.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        return Err(PersistError::RingOrder);
    }
    let (spec, members) = load_members(dir, index.entries.iter().map(|e| e.file.as_str()))?;
    let mut ring = CheckpointRing::new(index.capacity.max(members.len()));
    for (e, c) in index.entries.iter().zip(members) {
        ring.push(RingEntry {
            epoch: e.epoch,
            params: c.params,
            train_loss: e.train_loss,
        });
    }
    Ok((spec, ring))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::de::{seed_population, SeedSource};
    use crate::network::zoo::builtin;
    use crate::RngStream;

    fn pop() -> (NetworkSpec, Population) {
        let spec = builtin("lenet1").unwrap();
        let mut p = seed_population(SeedSource::Soup(&spec), 10, 0.0, &RngStream::new(2)).unwrap();
        p.generation = 17;
        for (i, f) in p.fitness.iter_mut().enumerate() {
            *f = if i == 3 { f64::NAN } else { 0.1 * i as f64 };
        }
        (spec, p)
    }

    #[test]
    fn population_round_trip() {
        let (spec, p) = pop();
        let dir = tempfile::tempdir().unwrap();
        save_population(&p, &spec, 2, dir.path()).unwrap();
        let (s2, q) = load_population(dir.path()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(q.members, p.members);
        assert_eq!(q.generation, 17);
        assert!(q.fitness[3].is_nan());
        for i in (0..10).filter(|&i| i != 3) {
            assert_eq!(q.fitness[i].to_bits(), p.fitness[i].to_bits());
        }
    }

    #[test]
    fn missing_member_is_named() {
        let (spec, p) = pop();
        let dir = tempfile::tempdir().unwrap();
        save_population(&p, &spec, 2, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("member_006.ckpt")).unwrap();
        match load_population(dir.path()) {
            Err(PersistError::MissingMember { index, file }) => {
                assert_eq!(index, 6);
                assert_eq!(file, "member_006.ckpt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_specs_rejected() {
        let (spec, p) = pop();
        let dir = tempfile::tempdir().unwrap();
        save_population(&p, &spec, 2, dir.path()).unwrap();
        let mlp = builtin("mlp").unwrap();
        let other = crate::network::init_params(&mlp, &RngStream::new(0));
        save_checkpoint(
            &Checkpoint::new(mlp, other, CheckpointMeta::default()),
            &dir.path().join("member_002.ckpt"),
        )
        .unwrap();
        assert!(matches!(load_population(dir.path()), Err(PersistError::MemberSpec { index: 2 })));
    }

    #[test]
    fn ring_round_trip() {
        let (spec, p) = pop();
        let mut ring = CheckpointRing::new(4);
        for (e, m) in p.members.iter().enumerate() {
            ring.push(RingEntry {
                epoch: e + 1,
                params: m.clone(),
                train_loss: e as f64,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        save_ring(&ring, &spec, 0, dir.path()).unwrap();
        let (_, back) = load_ring(dir.path()).unwrap();
        assert_eq!(back, ring);
        assert_eq!(back.epochs(), vec![7, 8, 9, 10]);
    }
}
