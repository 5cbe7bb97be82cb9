//! Core of the evolutionary autoencoder search: the genotype encoding of a
//! layer module, the symbolic autoencoder builder, the variation and
//! selection operators with fitness caching, and the in-process surrogate
//! evaluator.
//!
//! The crate is `no_std` and only needs `alloc`. Networking, timing and the
//! command line live in the `evonas` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod evolution;
pub mod fitness;
pub mod genotype;
pub mod network;
pub mod rng;

pub use evolution::{
    apply_results, crossover, initial_population, mutate_genotype, mutate_population,
    plan_evaluations, select, EvalRequest, EvaluationPlan, EvolutionConfig, EvolutionError,
    FitnessCache, FitnessOutcome, GenerationStats, Individual, Population,
};
pub use fitness::{
    fitness_from_loss, module_distance, surrogate_fitness, EvalConfig, EvalError, Evaluation,
    Evaluator, EvaluatorKind, SurrogateEvaluator,
};
pub use genotype::{
    search_space_size, FilterCount, Genotype, GenotypeError, LayerKind, LayerSpec,
    SearchSpaceConfig, CATALOG,
};
pub use network::{
    build_plan, param_count, validate, BuildConfig, BuildError, NetworkPlan, PlanNode, PlanOp,
    TensorShape, Validity,
};
