//! Variation, evaluation planning and (mu + lambda) selection.
//!
//! One generation is:
//!
//! 1. [`mutate_population`]: every parent picks a partner, each of the two is
//!    mutated with probability 1/2, and their crossover child joins the
//!    population together with any mutated parent copies.
//! 2. [`plan_evaluations`]: members that already carry a fitness are skipped,
//!    cached genotypes are filled from the [`FitnessCache`], and each remaining
//!    distinct genotype becomes one evaluation request.
//! 3. [`apply_results`]: fitness values flow back into members and the cache.
//! 4. [`select`]: the best `mu` members survive.
//!
//! Genotypes are never edited in place; every operator builds a new one.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write as _;

use thiserror::Error;

use crate::genotype::{Genotype, LayerSpec, DEFAULT_MAX_LAYERS};
use crate::rng::Draw;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvolutionConfig {
    /// Parent population size.
    pub mu: usize,
    pub max_num_layers: usize,
    pub num_generations: u32,
    pub rng_seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            mu: 10,
            max_num_layers: DEFAULT_MAX_LAYERS,
            num_generations: 20,
            rng_seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.mu < 2 {
            return Err(EvolutionError::InvalidConfig("mu must be at least 2"));
        }
        if self.num_generations < 1 {
            return Err(EvolutionError::InvalidConfig(
                "num_generations must be at least 1",
            ));
        }
        if self.max_num_layers < 1 {
            return Err(EvolutionError::InvalidConfig(
                "max_num_layers must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvolutionError {
    #[error("individual `{0}` has not been evaluated")]
    UnevaluatedIndividual(String),
    #[error("population of {have} cannot yield {want} survivors")]
    PopulationTooSmall { have: usize, want: usize },
    #[error("invalid evolution config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genotype: Genotype,
    fitness: Option<f64>,
    errored: bool,
    pub birth_generation: u32,
}

impl Individual {
    pub fn new(genotype: Genotype, birth_generation: u32) -> Self {
        Individual {
            genotype,
            fitness: None,
            errored: false,
            birth_generation,
        }
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }

    pub fn is_evaluated(&self) -> bool {
        self.fitness.is_some()
    }

    /// True when the evaluation failed; such members carry fitness 0.
    pub fn is_errored(&self) -> bool {
        self.errored
    }

    pub fn set_outcome(&mut self, outcome: FitnessOutcome) {
        self.fitness = Some(outcome.fitness);
        self.errored = outcome.errored;
    }
}

/// Fitness value as stored in the cache and on individuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessOutcome {
    pub fitness: f64,
    pub errored: bool,
}

impl FitnessOutcome {
    pub fn ok(fitness: f64) -> Self {
        FitnessOutcome {
            fitness,
            errored: false,
        }
    }

    /// Failed evaluation: fitness 0, never preferred by selection.
    pub fn errored() -> Self {
        FitnessOutcome {
            fitness: 0.0,
            errored: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<Individual>,
    pub generation: u32,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Highest-ranked evaluated member.
    pub fn best(&self) -> Option<&Individual> {
        self.members
            .iter()
            .filter(|m| m.is_evaluated())
            .min_by(|a, b| rank(a, b))
    }

    /// Mean fitness of evaluated members.
    pub fn mean_fitness(&self) -> Option<f64> {
        let values: Vec<f64> = self.members.iter().filter_map(|m| m.fitness).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// `mu` single-layer genotypes, each drawn uniformly from the catalog.
pub fn initial_population(mu: usize, rng: &mut (impl Draw + ?Sized)) -> Population {
    let members = (0..mu)
        .map(|_| Individual::new(Genotype::from_layers_unchecked(alloc::vec![LayerSpec::random(rng)]), 0))
        .collect();
    Population {
        members,
        generation: 0,
    }
}

/// Returns a mutated copy of `genotype`: with probability 1/2 (and room to
/// grow) a random layer is appended, otherwise a random position is replaced
/// by a random layer, which may equal the old one.
pub fn mutate_genotype(
    genotype: &Genotype,
    max_num_layers: usize,
    rng: &mut (impl Draw + ?Sized),
) -> Genotype {
    let mut layers = genotype.layers().to_vec();
    let z = rng.unit();
    if layers.len() < max_num_layers && z < 0.5 {
        layers.push(LayerSpec::random(rng));
    } else {
        let at = rng.below(layers.len());
        layers[at] = LayerSpec::random(rng);
    }
    Genotype::from_layers_unchecked(layers)
}

/// Child made of a non-empty prefix of `first` and a non-empty suffix of
/// `second`, truncated to `max_num_layers`.
pub fn crossover(
    first: &Genotype,
    second: &Genotype,
    max_num_layers: usize,
    rng: &mut (impl Draw + ?Sized),
) -> Genotype {
    let cut_first = 1 + rng.below(first.len());
    let cut_second = rng.below(second.len());
    let mut layers: Vec<LayerSpec> = first.layers()[..cut_first]
        .iter()
        .chain(&second.layers()[cut_second..])
        .copied()
        .collect();
    layers.truncate(max_num_layers);
    Genotype::from_layers_unchecked(layers)
}

/// One variation pass. The result starts as a copy of `population`; for each
/// parent it gains the crossover child and whichever of the parent and its
/// partner were mutated, so it holds between 2x and 4x the parents (the
/// offspring alone number between 1x and 3x). Partners are drawn from the
/// generation-start membership, excluding the parent itself.
pub fn mutate_population(
    population: &Population,
    max_num_layers: usize,
    rng: &mut (impl Draw + ?Sized),
) -> Population {
    let parents = &population.members;
    let n = parents.len();
    assert!(n >= 2, "variation needs at least two parents");
    let birth = population.generation + 1;
    let mut next = parents.clone();
    for (i, parent) in parents.iter().enumerate() {
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let partner = &parents[j];
        let mutate_parent = rng.unit() < 0.5;
        let mutate_partner = rng.unit() < 0.5;
        let p = mutate_parent.then(|| mutate_genotype(&parent.genotype, max_num_layers, rng));
        let o = mutate_partner.then(|| mutate_genotype(&partner.genotype, max_num_layers, rng));
        let child = crossover(
            p.as_ref().unwrap_or(&parent.genotype),
            o.as_ref().unwrap_or(&partner.genotype),
            max_num_layers,
            rng,
        );
        next.extend(p.map(|g| Individual::new(g, birth)));
        next.extend(o.map(|g| Individual::new(g, birth)));
        next.push(Individual::new(child, birth));
    }
    Population {
        members: next,
        generation: birth,
    }
}

/// Ranking used by selection: fitness descending, then fewer layers, then the
/// canonical key.
fn rank(a: &Individual, b: &Individual) -> Ordering {
    let fa = a.fitness.unwrap_or(f64::NEG_INFINITY);
    let fb = b.fitness.unwrap_or(f64::NEG_INFINITY);
    fb.total_cmp(&fa)
        .then_with(|| a.genotype.len().cmp(&b.genotype.len()))
        .then_with(|| a.genotype.key().cmp(b.genotype.key()))
}

/// Keeps the top `mu` members.
pub fn select(population: Population, mu: usize) -> Result<Population, EvolutionError> {
    if let Some(m) = population.members.iter().find(|m| !m.is_evaluated()) {
        return Err(EvolutionError::UnevaluatedIndividual(m.genotype.key().into()));
    }
    if population.len() < mu {
        return Err(EvolutionError::PopulationTooSmall {
            have: population.len(),
            want: mu,
        });
    }
    let mut members = population.members;
    members.sort_by(rank);
    members.truncate(mu);
    Ok(Population {
        members,
        generation: population.generation,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CacheKey {
    config_digest: String,
    genotype: String,
}

/// Memo of fitness by (evaluation config digest, canonical genotype key).
/// Entries are write-once.
#[derive(Debug, Clone, Default)]
pub struct FitnessCache {
    entries: BTreeMap<CacheKey, FitnessOutcome>,
    hits: u64,
    misses: u64,
}

impl FitnessCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Looks up a genotype, counting a hit or a miss.
    pub fn lookup(&mut self, config_digest: &str, genotype: &Genotype) -> Option<FitnessOutcome> {
        let found = self.peek(config_digest, genotype);
        match found {
            Some(_) => self.hits += 1,
            None => self.misses += 1,
        }
        found
    }

    /// Looks up without touching the counters.
    pub fn peek(&self, config_digest: &str, genotype: &Genotype) -> Option<FitnessOutcome> {
        self.entries
            .get(&CacheKey {
                config_digest: config_digest.into(),
                genotype: genotype.key().into(),
            })
            .copied()
    }

    /// Inserts if absent. Returns false (leaving the entry untouched) when the
    /// key is already present.
    pub fn insert(&mut self, config_digest: &str, genotype: &Genotype, outcome: FitnessOutcome) -> bool {
        let key = CacheKey {
            config_digest: config_digest.into(),
            genotype: genotype.key().into(),
        };
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, outcome);
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }
}

/// A distinct genotype that needs evaluating and the members waiting for it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub genotype: Genotype,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationPlan {
    pub requests: Vec<EvalRequest>,
    /// Members that already carried a fitness.
    pub skipped_evaluated: usize,
    /// Members filled from the cache.
    pub cache_hits: usize,
    /// Members sharing a request with an earlier member of the same batch.
    pub deduplicated: usize,
}

impl EvaluationPlan {
    pub fn dispatched(&self) -> usize {
        self.requests.len()
    }
}

/// Works out which members need evaluating. Cached fitness values are written
/// into the population immediately; duplicates within the population share a
/// single request.
pub fn plan_evaluations(
    population: &mut Population,
    cache: &mut FitnessCache,
    config_digest: &str,
) -> EvaluationPlan {
    let mut plan = EvaluationPlan::default();
    let mut pending: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, member) in population.members.iter_mut().enumerate() {
        if member.is_evaluated() {
            plan.skipped_evaluated += 1;
            continue;
        }
        if let Some(&req) = pending.get(member.genotype.key()) {
            plan.requests[req].members.push(idx);
            plan.deduplicated += 1;
            continue;
        }
        if let Some(outcome) = cache.lookup(config_digest, &member.genotype) {
            member.set_outcome(outcome);
            plan.cache_hits += 1;
            continue;
        }
        pending.insert(member.genotype.key().into(), plan.requests.len());
        plan.requests.push(EvalRequest {
            genotype: member.genotype.clone(),
            members: alloc::vec![idx],
        });
    }
    plan
}

/// Writes evaluation outcomes (aligned with `plan.requests`) into the
/// population and the cache.
pub fn apply_results(
    population: &mut Population,
    plan: &EvaluationPlan,
    outcomes: &[FitnessOutcome],
    cache: &mut FitnessCache,
    config_digest: &str,
) {
    assert_eq!(plan.requests.len(), outcomes.len(), "one outcome per request");
    for (request, &outcome) in plan.requests.iter().zip(outcomes) {
        cache.insert(config_digest, &request.genotype, outcome);
        for &idx in &request.members {
            population.members[idx].set_outcome(outcome);
        }
    }
}

/// Per-generation record of a search run.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    pub generation: u32,
    /// Members after variation, before selection.
    pub population_size: usize,
    pub dispatched: usize,
    /// Members resolved without their own evaluation: cache hits plus
    /// duplicates of a genotype dispatched in the same batch.
    pub cache_hits: usize,
    pub skipped_evaluated: usize,
    pub best_fitness: f64,
    /// Mean over the selected survivors.
    pub mean_fitness: f64,
    pub best_genotype_key: String,
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str =
    "generation,population,dispatched,cache_hits,skipped,best_fitness,mean_fitness,best_genotype,wall_ms";

impl GenerationStats {
    /// CSV row matching [`CSV_HEADER`]. The genotype key is quoted because it
    /// contains commas.
    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{:.6},{:.6},\"{}\",{}",
            self.generation,
            self.population_size,
            self.dispatched,
            self.cache_hits,
            self.skipped_evaluated,
            self.best_fitness,
            self.mean_fitness,
            self.best_genotype_key,
            self.wall_ms
        );
        row
    }
}
