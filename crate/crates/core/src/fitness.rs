//! Evaluation contract and the in-process evaluators.
//!
//! Fitness is the reciprocal of a loss. Real evaluations train the decoded
//! autoencoder and report a validation reconstruction loss; that happens in an
//! external worker. The surrogate evaluator here replaces training with a
//! distance to a target module so a whole search can run on a laptop in
//! milliseconds.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::genotype::{Genotype, GenotypeError, LayerSpec, SearchSpaceConfig};

/// Added to the surrogate distance so fitness tops out at 10.
pub const SURROGATE_LOSS_FLOOR: f64 = 0.1;
/// Losses below this are clamped before taking the reciprocal.
pub const MIN_LOSS: f64 = 1e-9;
/// Default noise variance handed to denoising trainers.
pub const DEFAULT_NOISE_SIGMA2: f64 = 1.0 / 3.0;
pub const DEFAULT_TARGET: &str = "5x5conv2d:64";

/// Fitness of a loss value, `1 / max(loss, MIN_LOSS)`.
pub fn fitness_from_loss(loss: f64) -> f64 {
    1.0 / loss.max(MIN_LOSS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Surrogate,
    Delay,
    External,
}

impl EvaluatorKind {
    pub const fn name(self) -> &'static str {
        match self {
            EvaluatorKind::Surrogate => "surrogate",
            EvaluatorKind::Delay => "delay",
            EvaluatorKind::External => "external",
        }
    }
}

/// Everything an evaluator needs besides the genotype. Travels inside every
/// task message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub evaluator_kind: EvaluatorKind,
    pub target_key: String,
    pub epochs: u32,
    pub delay_ms: u64,
    pub noise_sigma2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            evaluator_kind: EvaluatorKind::Surrogate,
            target_key: DEFAULT_TARGET.into(),
            epochs: 2,
            delay_ms: 0,
            noise_sigma2: DEFAULT_NOISE_SIGMA2,
        }
    }
}

impl EvalConfig {
    /// Stable 64-bit digest (16 hex chars) over every field. Two configs share a
    /// digest iff all fields are equal.
    pub fn digest(&self) -> String {
        let mut canon = String::new();
        let _ = write!(
            canon,
            "kind={};target={};epochs={};delay_ms={};sigma2={:016x}",
            self.evaluator_kind.name(),
            self.target_key,
            self.epochs,
            self.delay_ms,
            self.noise_sigma2.to_bits()
        );
        let hash = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in &hash[..8] {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// Outcome of one successful evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub loss: f64,
    pub eval_ms: u64,
}

impl Evaluation {
    pub fn from_loss(loss: f64, eval_ms: u64) -> Self {
        Evaluation {
            fitness: fitness_from_loss(loss),
            loss,
            eval_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("malformed surrogate target: {0}")]
    MalformedTarget(GenotypeError),
    #[error("evaluator `{0}` cannot run in this process")]
    Unsupported(&'static str),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

/// Something that turns a genotype into a fitness value.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, genotype: &Genotype, cfg: &EvalConfig) -> Result<Evaluation, EvalError>;
}

/// Substitution cost between two layers: 0 when equal, 0.5 when only the filter
/// count differs, 1 when the kind differs.
pub fn substitution_cost(a: &LayerSpec, b: &LayerSpec) -> f64 {
    if a == b {
        0.0
    } else if a.kind() == b.kind() {
        0.5
    } else {
        1.0
    }
}

/// Insertion or deletion cost.
pub const INDEL_COST: f64 = 1.0;

/// Weighted edit distance between two layer sequences.
pub fn module_distance(a: &[LayerSpec], b: &[LayerSpec]) -> f64 {
    // single rolling row over b
    let mut row: Vec<f64> = (0..=b.len()).map(|j| j as f64 * INDEL_COST).collect();
    for (i, la) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = (i + 1) as f64 * INDEL_COST;
        for (j, lb) in b.iter().enumerate() {
            let up = row[j + 1];
            let best = (diag + substitution_cost(la, lb))
                .min(up + INDEL_COST)
                .min(row[j] + INDEL_COST);
            diag = up;
            row[j + 1] = best;
        }
    }
    row[b.len()]
}

fn target_space() -> SearchSpaceConfig {
    SearchSpaceConfig::new(64).expect("positive")
}

/// Surrogate evaluation: loss is 0.1 plus the distance to the target module.
pub fn surrogate_fitness(genotype: &Genotype, cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
    let target =
        Genotype::parse(&cfg.target_key, &target_space()).map_err(EvalError::MalformedTarget)?;
    Ok(surrogate_against(genotype, &target))
}

fn surrogate_against(genotype: &Genotype, target: &Genotype) -> Evaluation {
    let loss = SURROGATE_LOSS_FLOOR + module_distance(genotype.layers(), target.layers());
    Evaluation::from_loss(loss, 0)
}

/// Stateless surrogate evaluator.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateEvaluator;

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, genotype: &Genotype, cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
        surrogate_fitness(genotype, cfg)
    }
}

/// Reconstruction loss trainers report: mean over samples of the squared L2
/// distance between input and reconstruction. For denoising the input is the
/// clean sample and the reconstruction is produced from a noised copy.
pub fn reconstruction_loss(inputs: &[Vec<f64>], outputs: &[Vec<f64>]) -> f64 {
    assert_eq!(inputs.len(), outputs.len(), "sample count mismatch");
    if inputs.is_empty() {
        return 0.0;
    }
    let total: f64 = inputs
        .iter()
        .zip(outputs)
        .map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "sample dimension mismatch");
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    total / inputs.len() as f64
}
