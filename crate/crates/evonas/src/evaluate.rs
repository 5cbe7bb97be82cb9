//! Evaluators available inside a worker process.

use std::thread;
use std::time::{Duration, Instant};

use evonas_core::{
    surrogate_fitness, EvalConfig, EvalError, Evaluation, Evaluator, EvaluatorKind, Genotype,
    SearchSpaceConfig, SurrogateEvaluator,
};

/// Widest module a worker accepts. Searches may raise the layer limit above
/// the default, so workers parse generously.
pub const WORKER_MAX_LAYERS: usize = 64;

/// Sleeps for `delay_ms`, then scores with the surrogate. Stands in for a
/// training run of fixed length.
#[derive(Debug, Clone, Copy, Default)]
pub struct DelayEvaluator;

impl Evaluator for DelayEvaluator {
    fn evaluate(&self, genotype: &Genotype, cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
        thread::sleep(Duration::from_millis(cfg.delay_ms));
        surrogate_fitness(genotype, cfg)
    }
}

/// Evaluator for `kind`, if this process can run it.
pub fn evaluator_for(kind: EvaluatorKind) -> Result<&'static dyn Evaluator, EvalError> {
    match kind {
        EvaluatorKind::Surrogate => Ok(&SurrogateEvaluator),
        EvaluatorKind::Delay => Ok(&DelayEvaluator),
        EvaluatorKind::External => Err(EvalError::Unsupported("external")),
    }
}

/// Parses and evaluates one task, timing it. Errors come back as text for the
/// result frame.
pub fn evaluate_task(genotype: &str, cfg: &EvalConfig) -> Result<Evaluation, String> {
    let start = Instant::now();
    let space = SearchSpaceConfig::new(WORKER_MAX_LAYERS).expect("positive");
    let genotype = Genotype::parse(genotype, &space).map_err(|e| e.to_string())?;
    let evaluator = evaluator_for(cfg.evaluator_kind).map_err(|e| e.to_string())?;
    let mut eval = evaluator
        .evaluate(&genotype, cfg)
        .map_err(|e| e.to_string())?;
    eval.eval_ms = start.elapsed().as_millis() as u64;
    Ok(eval)
}

/// Evaluation time the loopback dispatcher charges for one task, so its
/// reported wall time does not depend on the machine.
pub fn nominal_cost_ms(cfg: &EvalConfig) -> u64 {
    match cfg.evaluator_kind {
        EvaluatorKind::Delay => cfg.delay_ms,
        EvaluatorKind::Surrogate | EvaluatorKind::External => 0,
    }
}
