//! Differential evolution (DE/rand/1/bin) over flat parameter vectors.
//!
//! Generations are synchronous: every trial is built from generation-`g`
//! members, all trials are scored against the same fitness context, and the
//! population is replaced at a barrier. Trial `i` of generation `g` draws its
//! randomness from stream `[DE, g, i]`, so worker count cannot change results.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval::evaluate;
use crate::network::{init_params, jitter, loss, NetworkError, NetworkSpec, ParamVector};
use crate::rng::{tag, RngStream};
use crate::tensor::Tensor;
use crate::train::CheckpointRing;

#[derive(Debug, Error)]
pub enum DeError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("population of {0} is too small; DE needs at least 4 members")]
    TooSmall(usize),
    #[error("ring holds {have} vectors but the population needs {need}; set a positive jitter sigma to fill the rest")]
    RingUnderfull { have: usize, need: usize },
    #[error("members do not share one parameter layout")]
    LayoutMismatch,
    #[error("parent has {parent} coordinates, mutant {mutant}")]
    LengthMismatch { parent: usize, mutant: usize },
    #[error("invalid DE config: {0}")]
    Config(String),
    #[error("no pretrained run for learning rate {0}; train it first")]
    MissingPretrained(f64),
    #[error("empty grid axis '{0}'")]
    EmptyAxis(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeConfig {
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "Cr")]
    pub cr: f64,
    /// Population size `m`.
    pub population: usize,
    pub max_generations: usize,
    /// Stop once the best fitness falls below this.
    pub fitness_floor: f64,
    /// Stop when the best fitness improved by less than this over `patience` generations.
    pub min_improvement: f64,
    pub patience: usize,
    /// Samples drawn from the training set for each fitness context.
    pub fitness_subset: usize,
    /// Redraw the fitness subset every this many generations (0 = never).
    pub resample_every: usize,
    /// Always take one uniformly chosen coordinate from the mutant.
    pub force_jrand: bool,
    /// Noise used to fill the population when the ring has fewer than `m` vectors.
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            f: 0.1,
            cr: 0.5,
            population: 10,
            max_generations: 200,
            fitness_floor: 0.0,
            min_improvement: 1e-5,
            patience: 20,
            fitness_subset: 10_000,
            resample_every: 0,
            force_jrand: false,
            jitter_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let check = |ok: bool, field: &'static str, msg: &str| if ok { Ok(()) } else { Err((field, msg.to_string())) };
        check(self.f.is_finite(), "F", "must be finite")?;
        check((0.0..=1.0).contains(&self.cr), "Cr", "must be in [0, 1]")?;
        check(self.population >= 4, "population", "must be at least 4")?;
        check(self.fitness_floor.is_finite(), "fitness_floor", "must be finite")?;
        check(self.min_improvement.is_finite(), "min_improvement", "must be finite")?;
        check(self.patience >= 1, "patience", "must be at least 1")?;
        check(self.fitness_subset >= 1, "fitness_subset", "must be at least 1")?;
        check(
            self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0,
            "jitter_sigma",
            "must be non-negative",
        )?;
        Ok(())
    }
}

/// `m` parameter vectors with cached fitness; `NaN` marks a stale entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub members: Vec<ParamVector<f32>>,
    pub fitness: Vec<f64>,
    pub generation: u64,
}

impl Population {
    pub fn new(members: Vec<ParamVector<f32>>) -> Result<Self, DeError> {
        if members.len() < 4 {
            return Err(DeError::TooSmall(members.len()));
        }
        if members.iter().any(|m| m.layout() != members[0].layout()) {
            return Err(DeError::LayoutMismatch);
        }
        let fitness = vec![f64::NAN; members.len()];
        Ok(Self {
            members,
            fitness,
            generation: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mark_stale(&mut self) {
        self.fitness.iter_mut().for_each(|f| *f = f64::NAN);
    }

    pub fn is_fresh(&self) -> bool {
        self.fitness.iter().all(|f| !f.is_nan())
    }

    /// Index of the lowest cached fitness; ties go to the lowest index.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, &f) in self.fitness.iter().enumerate() {
            if f < self.fitness[best] || self.fitness[best].is_nan() && !f.is_nan() {
                best = i;
            }
        }
        best
    }

    pub fn best_fitness(&self) -> f64 {
        self.fitness[self.best_index()]
    }

    pub fn mean_fitness(&self) -> f64 {
        self.fitness.iter().sum::<f64>() / self.fitness.len() as f64
    }

    /// Scores every stale member against `fit`.
    pub fn refresh(&mut self, fit: &dyn Fitness) -> Result<usize, DeError> {
        let stale: Vec<usize> = (0..self.len()).filter(|&i| self.fitness[i].is_nan()).collect();
        let scores: Vec<f64> = stale
            .par_iter()
            .map(|&i| fit.fitness(&self.members[i]))
            .collect::<Result<_, _>>()?;
        for (&i, s) in stale.iter().zip(scores) {
            self.fitness[i] = s;
        }
        Ok(stale.len())
    }
}

/// Something that scores a parameter vector; lower is better.
pub trait Fitness: Sync {
    fn fitness(&self, member: &ParamVector<f32>) -> Result<f64, DeError>;

    /// Identifies the evaluation data; equal ids mean paired comparisons.
    fn subset_id(&self) -> u64 {
        0
    }
}

/// Mean cross-entropy (no L2 term) on a fixed evaluation subset.
#[derive(Clone, Debug)]
pub struct FitnessContext {
    pub spec: NetworkSpec,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub subset_id: u64,
}

impl FitnessContext {
    /// Draws `size` training samples with stream `[SUBSET, subset_id]`.
    pub fn from_dataset(
        spec: &NetworkSpec,
        data: &Dataset,
        size: usize,
        subset_id: u64,
        rng: &RngStream,
    ) -> Result<Self, DeError> {
        let sub = data.subset(size, &rng.derive(&[tag::SUBSET, subset_id]))?;
        Ok(Self {
            spec: spec.clone(),
            images: sub.images().clone(),
            labels: sub.labels().to_vec(),
            subset_id,
        })
    }
}

/// Mean cross-entropy of `member` on the context's samples, with λ = 0.
pub fn fitness(member: &ParamVector<f32>, ctx: &FitnessContext) -> Result<f64, DeError> {
    Ok(loss(&ctx.spec, member, &ctx.images, &ctx.labels, 0.0)?)
}

impl Fitness for FitnessContext {
    fn fitness(&self, member: &ParamVector<f32>) -> Result<f64, DeError> {
        fitness(member, self)
    }

    fn subset_id(&self) -> u64 {
        self.subset_id
    }
}

/// Where the initial population comes from.
pub enum SeedSource<'a> {
    /// The ring's vectors, newest last, jitter-filled up to `m` if needed.
    Ancestors(&'a CheckpointRing),
    /// Independent random initializations.
    Soup(&'a NetworkSpec),
}

pub fn seed_population(source: SeedSource<'_>, m: usize, jitter_sigma: f64, rng: &RngStream) -> Result<Population, DeError> {
    if m < 4 {
        return Err(DeError::TooSmall(m));
    }
    let members = match source {
        SeedSource::Soup(spec) => (0..m)
            .map(|k| init_params(spec, &rng.derive(&[tag::SEED_POP, k as u64])))
            .collect(),
        SeedSource::Ancestors(ring) => {
            let r = ring.len();
            if r == 0 || (r < m && jitter_sigma <= 0.0) {
                return Err(DeError::RingUnderfull { have: r, need: m });
            }
            let mut members: Vec<ParamVector<f32>> =
                ring.entries().skip(r.saturating_sub(m)).map(|e| e.params.clone()).collect();
            let newest = members.last().expect("ring not empty").clone();
            for k in r..m {
                let mut g = rng.derive(&[tag::SEED_POP, k as u64]).rng();
                members.push(jitter(&newest, jitter_sigma, &mut g));
            }
            members
        }
    };
    Population::new(members)
}

/// Three mutually distinct indices in `0..m`, all different from `i`.
pub fn draw_donors(m: usize, i: usize, rng: &mut impl Rng) -> Result<[usize; 3], DeError> {
    if m < 4 {
        return Err(DeError::TooSmall(m));
    }
    let mut picked = [usize::MAX; 3];
    for slot in 0..3 {
        picked[slot] = loop {
            let c = rng.random_range(0..m);
            if c != i && !picked[..slot].contains(&c) {
                break c;
            }
        };
    }
    Ok(picked)
}

/// `θ_j + F·(θ_k − θ_l)` for donors drawn from `pop`, no clipping.
pub fn mutate(pop: &Population, i: usize, f: f64, rng: &mut impl Rng) -> Result<ParamVector<f32>, DeError> {
    let [j, k, l] = draw_donors(pop.len(), i, rng)?;
    Ok(mutant_of(&pop.members[j], &pop.members[k], &pop.members[l], f))
}

pub fn mutant_of(
    base: &ParamVector<f32>,
    a: &ParamVector<f32>,
    b: &ParamVector<f32>,
    f: f64,
) -> ParamVector<f32> {
    let f = f as f32;
    let mut out = base.clone();
    for ((o, &x), &y) in out.values_mut().iter_mut().zip(a.values()).zip(b.values()) {
        *o += f * (x - y);
    }
    out
}

/// Binomial crossover; also returns how many coordinates came from the mutant.
///
/// Coordinate `t` takes the mutant value when `u ≤ Cr` with `u` uniform on
/// `(0, 1]`, so `Cr = 0` never and `Cr = 1` always picks the mutant.
pub fn crossover_counted(
    parent: &ParamVector<f32>,
    mutant: &ParamVector<f32>,
    cr: f64,
    force_jrand: bool,
    rng: &mut impl Rng,
) -> Result<(ParamVector<f32>, usize), DeError> {
    if parent.len() != mutant.len() {
        return Err(DeError::LengthMismatch {
            parent: parent.len(),
            mutant: mutant.len(),
        });
    }
    let d = parent.len();
    let jrand = if force_jrand && d > 0 { Some(rng.random_range(0..d)) } else { None };
    if cr >= 1.0 {
        return Ok((mutant.clone(), d));
    }
    let mut trial = parent.clone();
    let mut taken = 0;
    if cr > 0.0 {
        for (t, (o, &mv)) in trial.values_mut().iter_mut().zip(mutant.values()).enumerate() {
            let u = 1.0 - rng.random::<f64>();
            if u <= cr || Some(t) == jrand {
                *o = mv;
                taken += 1;
            }
        }
    } else if let Some(t) = jrand {
        trial.values_mut()[t] = mutant.values()[t];
        taken = 1;
    }
    Ok((trial, taken))
}

pub fn crossover(
    parent: &ParamVector<f32>,
    mutant: &ParamVector<f32>,
    cr: f64,
    force_jrand: bool,
    rng: &mut impl Rng,
) -> Result<ParamVector<f32>, DeError> {
    crossover_counted(parent, mutant, cr, force_jrand, rng).map(|(t, _)| t)
}

/// Work done by one individual update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCount {
    /// Parameter slots written while forming the mutant.
    pub mutation: u64,
    /// Slots the trial took from the mutant.
    pub crossover: u64,
    /// Fitness comparisons made by selection.
    pub comparisons: u64,
}

/// Mutation, crossover and selection for member `i`, with operation counts.
///
/// Returns the surviving vector. `score` is only called for trials that
/// differ from the parent.
pub fn update_counted(
    pop: &Population,
    i: usize,
    cfg: &DeConfig,
    rng: &mut impl Rng,
    score: impl FnOnce(&ParamVector<f32>) -> f64,
) -> Result<(ParamVector<f32>, UpdateCount), DeError> {
    let [j, k, l] = draw_donors(pop.len(), i, rng)?;
    let f = cfg.f as f32;
    let mut mutant = pop.members[j].clone();
    let mut count = UpdateCount::default();
    for ((o, &x), &y) in mutant
        .values_mut()
        .iter_mut()
        .zip(pop.members[k].values())
        .zip(pop.members[l].values())
    {
        *o += f * (x - y);
        count.mutation += 1;
    }
    let parent = &pop.members[i];
    let (trial, taken) = crossover_counted(parent, &mutant, cfg.cr, cfg.force_jrand, rng)?;
    count.crossover = taken as u64;
    if taken == 0 || &trial == parent {
        return Ok((parent.clone(), count));
    }
    let ft = score(&trial);
    count.comparisons = 1;
    Ok((if ft < pop.fitness[i] { trial } else { parent.clone() }, count))
}

/// Per-generation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    /// Generation number after this update (1-based).
    pub gen: u64,
    pub best_fit: f64,
    pub mean_fit: f64,
    pub accepts: usize,
    /// Fitness evaluations spent, including refreshes of stale members.
    pub evaluations: usize,
    pub subset_id: u64,
    pub wall_ms: u64,
}

impl GenMetrics {
    pub fn to_json(&self, wall_clock: bool) -> serde_json::Value {
        serde_json::json!({
            "stage": "de",
            "gen": self.gen,
            "best_fit": self.best_fit,
            "mean_fit": self.mean_fit,
            "accepts": self.accepts,
            "wall_ms": if wall_clock { self.wall_ms } else { 0 },
        })
    }
}

/// One synchronous mutate–crossover–select round.
pub fn evolve_generation(pop: &Population, cfg: &DeConfig, fit: &dyn Fitness) -> Result<(Population, GenMetrics), DeError> {
    let start = Instant::now();
    let mut cur = pop.clone();
    let mut evaluations = cur.refresh(fit)?;
    let m = cur.len();
    let root = RngStream::new(cfg.seed);
    let g = cur.generation;
    let trials: Vec<Option<(ParamVector<f32>, f64)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.derive(&[tag::DE, g, i as u64]).rng();
            let mutant = mutate(&cur, i, cfg.f, &mut rng)?;
            let (trial, taken) = crossover_counted(&cur.members[i], &mutant, cfg.cr, cfg.force_jrand, &mut rng)?;
            // A trial identical to its parent can never win a strict comparison.
            if taken == 0 || trial == cur.members[i] {
                return Ok(None);
            }
            let f = fit.fitness(&trial)?;
            Ok(Some((trial, f)))
        })
        .collect::<Result<_, DeError>>()?;
    let mut accepts = 0;
    for (i, t) in trials.into_iter().enumerate() {
        if let Some((trial, f)) = t {
            evaluations += 1;
            if f < cur.fitness[i] {
                cur.members[i] = trial;
                cur.fitness[i] = f;
                accepts += 1;
            }
        }
    }
    cur.generation += 1;
    let metrics = GenMetrics {
        gen: cur.generation,
        best_fit: cur.best_fitness(),
        mean_fit: cur.mean_fitness(),
        accepts,
        evaluations,
        subset_id: fit.subset_id(),
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((cur, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeStop {
    MaxGenerations,
    FitnessFloor,
    Plateau,
}

#[derive(Clone, Debug)]
pub struct DeOutcome {
    pub best: ParamVector<f32>,
    pub best_fitness: f64,
    /// Best fitness of the seed population on the first context.
    pub initial_best_fitness: f64,
    pub population: Population,
    pub history: Vec<GenMetrics>,
    pub stop: DeStop,
}

/// Runs generations until the budget or a stopping rule ends the search.
///
/// `make_ctx(k)` builds the `k`-th fitness context; `k` only advances when
/// `resample_every > 0`.
pub fn run_de<C: Fitness>(
    mut pop: Population,
    cfg: &DeConfig,
    mut make_ctx: impl FnMut(u64) -> Result<C, DeError>,
    observer: &mut dyn FnMut(&GenMetrics, &Population),
) -> Result<DeOutcome, DeError> {
    cfg.validate()
        .map_err(|(field, msg)| DeError::Config(format!("{field} {msg}")))?;
    if pop.len() < 4 {
        return Err(DeError::TooSmall(pop.len()));
    }
    let mut ctx = make_ctx(0)?;
    pop.refresh(&ctx)?;
    let initial_best_fitness = pop.best_fitness();
    let mut history: Vec<GenMetrics> = Vec::new();
    let mut stop = DeStop::MaxGenerations;
    for g in 0..cfg.max_generations {
        if cfg.resample_every > 0 && g > 0 && g % cfg.resample_every == 0 {
            ctx = make_ctx((g / cfg.resample_every) as u64)?;
            pop.mark_stale();
        }
        let (next, metrics) = evolve_generation(&pop, cfg, &ctx)?;
        pop = next;
        observer(&metrics, &pop);
        history.push(metrics);

        let best = pop.best_fitness();
        if best < cfg.fitness_floor {
            stop = DeStop::FitnessFloor;
            break;
        }
        if history.len() > cfg.patience {
            let before = &history[history.len() - 1 - cfg.patience];
            if before.subset_id == ctx.subset_id() && before.best_fit - best < cfg.min_improvement {
                stop = DeStop::Plateau;
                break;
            }
        }
    }
    let i = pop.best_index();
    Ok(DeOutcome {
        best: pop.members[i].clone(),
        best_fitness: pop.fitness[i],
        initial_best_fitness,
        population: pop,
        history,
        stop,
    })
}

/// The three search axes; defaults reproduce the published grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "F")]
    pub f: Vec<f64>,
    #[serde(rename = "Cr")]
    pub cr: Vec<f64>,
    pub lr: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            f: vec![0.01, 0.1, 1.0, 2.0],
            cr: vec![0.0, 0.05, 0.5, 1.0],
            lr: vec![1e-2, 2e-2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub lr: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "Cr")]
    pub cr: f64,
}

impl GridSpec {
    /// Cartesian product, `lr` outermost and `Cr` innermost.
    pub fn cells(&self) -> Result<Vec<GridCell>, DeError> {
        for (name, axis) in [("lr", &self.lr), ("F", &self.f), ("Cr", &self.cr)] {
            if axis.is_empty() {
                return Err(DeError::EmptyAxis(name));
            }
        }
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &f in &self.f {
                for &cr in &self.cr {
                    out.push(GridCell {
                        index: out.len(),
                        lr,
                        f,
                        cr,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cell: GridCell,
    pub seed: u64,
    pub initial_best_fitness: f64,
    pub best_fitness: f64,
    pub generations: usize,
    pub stop: DeStop,
    pub test_accuracy: f64,
    /// Test accuracy of the best-fitness ancestor, for comparison.
    pub ancestor_test_accuracy: f64,
}

/// Pretrained state for one learning rate.
pub struct Pretrained<'a> {
    pub lr: f64,
    pub ring: &'a CheckpointRing,
}

/// Runs DE for every grid cell and ranks cells by held-out accuracy
/// (descending, ties by cell order).
///
/// Every cell scores fitness on the same subset drawn from `master_seed`;
/// cell `c` evolves with seed `[GRID, c]`.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    grid: &GridSpec,
    pretrained: &[Pretrained<'_>],
    base: &DeConfig,
    spec: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
    master_seed: u64,
    on_cell: &mut dyn FnMut(&GridResult),
) -> Result<Vec<GridResult>, DeError> {
    let cells = grid.cells()?;
    for &lr in &grid.lr {
        if !pretrained.iter().any(|p| p.lr == lr) {
            return Err(DeError::MissingPretrained(lr));
        }
    }
    let master = RngStream::new(master_seed);
    let ctx = FitnessContext::from_dataset(spec, train, base.fitness_subset, 0, &master)?;
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let ring = pretrained.iter().find(|p| p.lr == cell.lr).expect("checked above").ring;
        let seed = master.derive(&[tag::GRID, cell.index as u64]).derive_seed();
        let cfg = DeConfig {
            f: cell.f,
            cr: cell.cr,
            seed,
            ..base.clone()
        };
        let pop = seed_population(SeedSource::Ancestors(ring), cfg.population, cfg.jitter_sigma, &RngStream::new(seed))?;
        let out = if cfg.resample_every == 0 {
            run_de(pop, &cfg, |_| Ok(&ctx), &mut |_, _| {})?
        } else {
            run_de(
                pop,
                &cfg,
                |k| FitnessContext::from_dataset(spec, train, cfg.fitness_subset, k, &master),
                &mut |_, _| {},
            )?
        };
        let first = {
            let mut p = out.population.clone();
            p.members.clone_from(&seed_population(SeedSource::Ancestors(ring), cfg.population, cfg.jitter_sigma, &RngStream::new(seed))?.members);
            p.mark_stale();
            p.refresh(&ctx)?;
            p.members[p.best_index()].clone()
        };
        let r = GridResult {
            cell,
            seed,
            initial_best_fitness: out.initial_best_fitness,
            best_fitness: out.best_fitness,
            generations: out.history.len(),
            stop: out.stop,
            test_accuracy: evaluate(spec, &out.best, test, 1024)?.accuracy,
            ancestor_test_accuracy: evaluate(spec, &first, test, 1024)?.accuracy,
        };
        on_cell(&r);
        results.push(r);
    }
    results.sort_by(|a, b| b.test_accuracy.total_cmp(&a.test_accuracy).then(a.cell.index.cmp(&b.cell.index)));
    Ok(results)
}

impl<T: Fitness> Fitness for &T {
    fn fitness(&self, member: &ParamVector<f32>) -> Result<f64, DeError> {
        (**self).fitness(member)
    }

    fn subset_id(&self) -> u64 {
        (**self).subset_id()
    }
}
