//! The model role: runs the evolutionary loop and sends evaluation batches
//! either to an in-process evaluator or through a broker.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use evonas_core::evolution::CSV_HEADER;
use evonas_core::rng::{generation_stream, stream, INITIAL_STREAM, RANDOM_SEARCH_STREAM};
use evonas_core::{
    apply_results, initial_population, mutate_population, plan_evaluations, select, EvalConfig,
    EvolutionConfig, EvolutionError, FitnessCache, FitnessOutcome, GenerationStats, Genotype,
    Individual, Population, SearchSpaceConfig,
};
use log::{debug, info, warn};
use thiserror::Error;

use crate::evaluate::{evaluate_task, nominal_cost_ms};
use crate::nameserver::query_brokers;
use crate::net::Connection;
use crate::wire::{Message, ProtocolTimeouts, Role, WireError};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub genotype: Genotype,
    pub generation: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Aligned with the submitted batch.
    pub outcomes: Vec<FitnessOutcome>,
    pub wall_ms: u64,
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("{resolved} of {total} tasks resolved before the dispatch gave up: {reason}")]
    Timeout {
        resolved: usize,
        total: usize,
        reason: String,
    },
    #[error("no broker reachable: {0}")]
    Unreachable(String),
}

/// Sends one batch of evaluations and waits for all of them.
pub trait Dispatcher {
    fn dispatch(&mut self, batch: &[TaskSpec], cfg: &EvalConfig) -> Result<BatchResult, DispatchError>;
}

fn outcome_of(result: Result<f64, String>) -> FitnessOutcome {
    match result {
        Ok(f) => FitnessOutcome::ok(f),
        Err(_) => FitnessOutcome::errored(),
    }
}

/// Evaluates in the calling thread. Reports the nominal evaluation time
/// rather than a measurement, so runs are byte-for-byte repeatable.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoopbackDispatcher;

impl Dispatcher for LoopbackDispatcher {
    fn dispatch(&mut self, batch: &[TaskSpec], cfg: &EvalConfig) -> Result<BatchResult, DispatchError> {
        let outcomes = batch
            .iter()
            .map(|t| outcome_of(evaluate_task(t.genotype.key(), cfg).map(|e| e.fitness)))
            .collect();
        Ok(BatchResult {
            outcomes,
            wall_ms: nominal_cost_ms(cfg) * batch.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Broker(String),
    Nameserver(String),
}

/// Talks to a broker over one long-lived connection. If the connection drops
/// mid-batch the unresolved tasks are resubmitted once, after reconnecting.
pub struct BrokeredDispatcher {
    endpoint: Endpoint,
    model_id: String,
    timeouts: ProtocolTimeouts,
    /// Give up when no result arrives for this long.
    pub progress_timeout: Duration,
    /// How long to keep trying to reach a broker.
    pub connect_timeout: Duration,
    conn: Option<Connection>,
    pub resubmissions: u64,
}

impl BrokeredDispatcher {
    pub fn new(endpoint: Endpoint, timeouts: ProtocolTimeouts) -> Self {
        BrokeredDispatcher {
            endpoint,
            model_id: format!("model-{}", uuid::Uuid::new_v4()),
            timeouts,
            progress_timeout: Duration::from_secs(600),
            connect_timeout: Duration::from_millis(timeouts.request_timeout_ms),
            conn: None,
            resubmissions: 0,
        }
    }

    fn broker_address(&self) -> Result<String, String> {
        match &self.endpoint {
            Endpoint::Broker(a) => Ok(a.clone()),
            Endpoint::Nameserver(ns) => {
                let t = Duration::from_millis(self.timeouts.request_timeout_ms);
                let list = query_brokers(ns, &self.model_id, Role::Model, t)
                    .map_err(|e| format!("nameserver {ns}: {e}"))?;
                list.into_iter()
                    .next()
                    .map(|b| b.address)
                    .ok_or_else(|| format!("nameserver {ns} lists no live broker"))
            }
        }
    }

    /// Connects, retrying until `connect_timeout` runs out.
    pub fn connect(&mut self) -> Result<(), DispatchError> {
        let deadline = Instant::now() + self.connect_timeout;
        let t = Duration::from_millis(self.timeouts.request_timeout_ms);
        loop {
            let attempt = self
                .broker_address()
                .and_then(|a| Connection::connect(&a, t).map_err(|e| format!("{a}: {e}")));
            match attempt {
                Ok(c) => {
                    info!("model {} connected to {}", self.model_id, c.peer());
                    self.conn = Some(c);
                    return Ok(());
                }
                Err(e) if Instant::now() >= deadline => return Err(DispatchError::Unreachable(e)),
                Err(e) => {
                    debug!("retrying broker connection: {e}");
                    std::thread::sleep(Duration::from_millis(100));
                }
            }
        }
    }

    fn submit(&self, ids: &[(String, usize)], batch: &[TaskSpec], cfg: &EvalConfig) -> Result<(), WireError> {
        let conn = self.conn.as_ref().ok_or(WireError::Closed)?;
        for (task_id, idx) in ids {
            conn.send(&Message::SubmitTask {
                task_id: task_id.clone(),
                sender_id: self.model_id.clone(),
                genotype: batch[*idx].genotype.key().into(),
                eval_config: cfg.clone(),
                generation: batch[*idx].generation,
            })?;
        }
        Ok(())
    }
}

impl Dispatcher for BrokeredDispatcher {
    fn dispatch(&mut self, batch: &[TaskSpec], cfg: &EvalConfig) -> Result<BatchResult, DispatchError> {
        let start = Instant::now();
        if self.conn.is_none() {
            self.connect()?;
        }
        let ids: Vec<(String, usize)> = (0..batch.len())
            .map(|i| (uuid::Uuid::new_v4().to_string(), i))
            .collect();
        let mut pending: HashMap<String, usize> = ids.iter().cloned().collect();
        let mut outcomes = vec![None; batch.len()];
        let mut resubmitted = false;
        let mut last_progress = Instant::now();
        let mut link = self.submit(&ids, batch, cfg);
        let timeout = |pending: &HashMap<String, usize>, reason: String| DispatchError::Timeout {
            resolved: batch.len() - pending.len(),
            total: batch.len(),
            reason,
        };
        while !pending.is_empty() {
            if link.is_ok() {
                let conn = self.conn.as_ref().expect("connected");
                link = match conn.recv_timeout(Duration::from_millis(200)) {
                    Ok(Some(Message::TaskResult {
                        task_id,
                        fitness,
                        error,
                        ..
                    })) => {
                        if let Some(idx) = pending.remove(&task_id) {
                            outcomes[idx] = Some(outcome_of(match error {
                                None => Ok(fitness),
                                Some(e) => Err(e),
                            }));
                            last_progress = Instant::now();
                        }
                        Ok(())
                    }
                    Ok(Some(other)) => {
                        debug!("model ignoring {}", other.type_name());
                        Ok(())
                    }
                    Ok(None) => Ok(()),
                    Err(e) => Err(e),
                };
            }
            if let Err(e) = &link {
                if resubmitted {
                    self.conn = None;
                    return Err(timeout(&pending, format!("broker connection lost twice: {e}")));
                }
                warn!("broker connection lost ({e}); resubmitting {} tasks", pending.len());
                resubmitted = true;
                self.resubmissions += 1;
                self.conn = None;
                self.connect().map_err(|e| timeout(&pending, e.to_string()))?;
                let left: Vec<(String, usize)> = ids
                    .iter()
                    .filter(|(id, _)| pending.contains_key(id))
                    .cloned()
                    .collect();
                link = self.submit(&left, batch, cfg);
                last_progress = Instant::now();
            }
            if last_progress.elapsed() > self.progress_timeout {
                return Err(timeout(&pending, "no results within the progress timeout".into()));
            }
        }
        Ok(BatchResult {
            outcomes: outcomes.into_iter().map(|o| o.expect("all resolved")).collect(),
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub seed: u64,
    /// Row 0 is the initial population; row g follows the g-th variation.
    pub stats: Vec<GenerationStats>,
    pub final_population: Population,
    pub evaluations: usize,
}

impl SearchReport {
    pub fn best(&self) -> Option<&Individual> {
        self.final_population.best()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.stats {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    /// The report with every wall time zeroed.
    pub fn without_timing(&self) -> SearchReport {
        let mut r = self.clone();
        for s in &mut r.stats {
            s.wall_ms = 0;
        }
        r
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "generations: {}", self.stats.len().saturating_sub(1));
        let _ = writeln!(out, "evaluations dispatched: {}", self.evaluations);
        if let Some(best) = self.best() {
            let _ = writeln!(out, "best genotype: {}", best.genotype);
            let _ = writeln!(out, "best fitness: {:.6}", best.fitness().unwrap_or(0.0));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] EvolutionError),
    #[error("dispatch aborted: {source}")]
    Dispatch {
        source: DispatchError,
        partial: Box<SearchReport>,
    },
}

/// Plans, dispatches and applies one round of evaluations. Returns the
/// per-generation counters that do not depend on selection.
fn evaluate_population(
    population: &mut Population,
    cache: &mut FitnessCache,
    digest: &str,
    eval_cfg: &EvalConfig,
    dispatcher: &mut dyn Dispatcher,
) -> Result<(usize, usize, usize, u64), DispatchError> {
    let plan = plan_evaluations(population, cache, digest);
    let batch: Vec<TaskSpec> = plan
        .requests
        .iter()
        .map(|r| TaskSpec {
            genotype: r.genotype.clone(),
            generation: population.generation,
        })
        .collect();
    let result = if batch.is_empty() {
        BatchResult {
            outcomes: Vec::new(),
            wall_ms: 0,
        }
    } else {
        dispatcher.dispatch(&batch, eval_cfg)?
    };
    apply_results(population, &plan, &result.outcomes, cache, digest);
    Ok((
        plan.dispatched(),
        plan.cache_hits + plan.deduplicated,
        plan.skipped_evaluated,
        result.wall_ms,
    ))
}

fn stats_row(
    survivors: &Population,
    population_size: usize,
    counters: (usize, usize, usize, u64),
) -> GenerationStats {
    let best = survivors.best().expect("survivors are evaluated");
    GenerationStats {
        generation: survivors.generation,
        population_size,
        dispatched: counters.0,
        cache_hits: counters.1,
        skipped_evaluated: counters.2,
        best_fitness: best.fitness().unwrap_or(0.0),
        mean_fitness: survivors.mean_fitness().unwrap_or(0.0),
        best_genotype_key: best.genotype.key().into(),
        wall_ms: counters.3,
    }
}

pub fn run_search(
    evo: &EvolutionConfig,
    eval_cfg: &EvalConfig,
    dispatcher: &mut dyn Dispatcher,
) -> Result<SearchReport, SearchError> {
    run_search_observed(evo, eval_cfg, dispatcher, &mut |_| {})
}

/// Runs the full search, calling `observe` after every generation.
pub fn run_search_observed(
    evo: &EvolutionConfig,
    eval_cfg: &EvalConfig,
    dispatcher: &mut dyn Dispatcher,
    observe: &mut dyn FnMut(&GenerationStats),
) -> Result<SearchReport, SearchError> {
    evo.validate()?;
    let digest = eval_cfg.digest();
    let mut cache = FitnessCache::new();
    let mut report = SearchReport {
        seed: evo.rng_seed,
        stats: Vec::new(),
        final_population: Population {
            members: Vec::new(),
            generation: 0,
        },
        evaluations: 0,
    };
    let abort = |source, report: &SearchReport| SearchError::Dispatch {
        source,
        partial: Box::new(report.clone()),
    };

    let mut population = initial_population(evo.mu, &mut stream(evo.rng_seed, INITIAL_STREAM));
    let counters = evaluate_population(&mut population, &mut cache, &digest, eval_cfg, dispatcher)
        .map_err(|e| abort(e, &report))?;
    report.evaluations += counters.0;
    let row = stats_row(&population, population.len(), counters);
    observe(&row);
    report.stats.push(row);
    report.final_population = population.clone();

    for _ in 0..evo.num_generations {
        let mut rng = stream(evo.rng_seed, generation_stream(population.generation));
        let mut next = mutate_population(&population, evo.max_num_layers, &mut rng);
        let counters = evaluate_population(&mut next, &mut cache, &digest, eval_cfg, dispatcher)
            .map_err(|e| abort(e, &report))?;
        report.evaluations += counters.0;
        let size = next.len();
        population = select(next, evo.mu)?;
        let row = stats_row(&population, size, counters);
        observe(&row);
        report.stats.push(row);
        report.final_population = population.clone();
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchReport {
    pub seed: u64,
    pub samples: Vec<Individual>,
    pub dispatched: usize,
    pub best_fitness: f64,
    pub best_genotype_key: String,
    pub mean_fitness: f64,
    /// Population standard deviation over all samples.
    pub stddev_fitness: f64,
    pub wall_ms: u64,
}

impl RandomSearchReport {
    pub fn summary(&self) -> String {
        format!(
            "samples: {}\nevaluations dispatched: {}\nbest genotype: {}\nbest fitness: {:.6}\nmean fitness: {:.6}\nstddev fitness: {:.6}\n",
            self.samples.len(),
            self.dispatched,
            self.best_genotype_key,
            self.best_fitness,
            self.mean_fitness,
            self.stddev_fitness
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,genotype,fitness\n");
        for (i, s) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{i},\"{}\",{:.6}", s.genotype, s.fitness().unwrap_or(0.0));
        }
        out
    }
}

/// Evaluates `n_samples` genotypes with lengths uniform in 1..=max layers.
/// Repeated samples are evaluated once and counted every time.
pub fn run_random_search(
    n_samples: usize,
    evo: &EvolutionConfig,
    eval_cfg: &EvalConfig,
    dispatcher: &mut dyn Dispatcher,
) -> Result<RandomSearchReport, SearchError> {
    if n_samples == 0 {
        return Err(EvolutionError::InvalidConfig("random search needs at least one sample").into());
    }
    let space = SearchSpaceConfig::new(evo.max_num_layers)
        .ok_or(EvolutionError::InvalidConfig("max_num_layers must be at least 1"))?;
    let mut rng = stream(evo.rng_seed, RANDOM_SEARCH_STREAM);
    let mut population = Population {
        members: (0..n_samples)
            .map(|_| Individual::new(Genotype::random(&mut rng, &space), 0))
            .collect(),
        generation: 0,
    };
    let mut cache = FitnessCache::new();
    let (dispatched, _, _, wall_ms) = evaluate_population(
        &mut population,
        &mut cache,
        &eval_cfg.digest(),
        eval_cfg,
        dispatcher,
    )
    .map_err(|source| SearchError::Dispatch {
        source,
        partial: Box::new(SearchReport {
            seed: evo.rng_seed,
            stats: Vec::new(),
            final_population: population.clone(),
            evaluations: 0,
        }),
    })?;
    let values: Vec<f64> = population
        .members
        .iter()
        .map(|m| m.fitness().unwrap_or(0.0))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let best = population.best().expect("all evaluated").clone();
    Ok(RandomSearchReport {
        seed: evo.rng_seed,
        samples: population.members,
        dispatched,
        best_fitness: best.fitness().unwrap_or(0.0),
        best_genotype_key: best.genotype.key().into(),
        mean_fitness: mean,
        stddev_fitness: var.sqrt(),
        wall_ms,
    })
}
