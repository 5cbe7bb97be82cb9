//! Command line. Every flag can also come from an `EVONAS_*` environment
//! variable. Exit codes: 0 success, 1 bad input or configuration, 2 the
//! distributed run could not complete.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evonas_core::{
    build_plan, BuildConfig, EvalConfig, EvaluatorKind, EvolutionConfig, Genotype,
    SearchSpaceConfig, TensorShape,
};
use log::info;

use crate::broker::{Broker, BrokerOptions};
use crate::clock::MonotonicClock;
use crate::driver::{
    run_random_search, run_search_observed, BrokeredDispatcher, Dispatcher, Endpoint,
    LoopbackDispatcher, SearchError,
};
use crate::nameserver::Nameserver;
use crate::scaling::{run_scaling, ScalingConfig, ScalingError};
use crate::wire::ProtocolTimeouts;
use crate::worker::{run_worker, Discovery, WorkerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DISTRIBUTED: i32 = 2;

const SEARCH_HELP: &str = "\
CSV columns, one row per generation (row 0 is the initial population):
generation,population,dispatched,cache_hits,skipped,best_fitness,mean_fitness,best_genotype,wall_ms";

const RANDOM_HELP: &str = "CSV columns: sample,genotype,fitness";

const SCALING_HELP: &str = "CSV columns: workers,tasks_per_second,speedup\n\
tasks_per_second is the geometric mean of per-window result counts divided by \
the window length; speedup is relative to the first worker count.";

#[derive(Debug, Parser)]
#[command(name = "evonas", version, about = "Distributed evolutionary search for autoencoder layer modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the broker registry.
    Nameserver(NameserverArgs),
    /// Run a task broker.
    Broker(BrokerArgs),
    /// Run an evaluation worker.
    Worker(WorkerArgs),
    /// Run the evolutionary search.
    #[command(after_help = SEARCH_HELP)]
    Search(SearchArgs),
    /// Score uniformly random modules as a baseline.
    #[command(after_help = RANDOM_HELP)]
    RandomSearch(RandomSearchArgs),
    /// Print the autoencoder built from one layer module.
    Describe(DescribeArgs),
    /// Measure throughput against the number of worker processes.
    #[command(after_help = SCALING_HELP)]
    ScalingTest(ScalingArgs),
    /// Run a short end-to-end check in this process.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorArg {
    Surrogate,
    Delay,
    External,
}

impl From<EvaluatorArg> for EvaluatorKind {
    fn from(e: EvaluatorArg) -> Self {
        match e {
            EvaluatorArg::Surrogate => EvaluatorKind::Surrogate,
            EvaluatorArg::Delay => EvaluatorKind::Delay,
            EvaluatorArg::External => EvaluatorKind::External,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TimingArgs {
    /// Heartbeat interval in milliseconds. Leases expire after three misses.
    #[arg(long, env = "EVONAS_HEARTBEAT_MS", default_value_t = 2000)]
    pub heartbeat_ms: u64,
}

impl TimingArgs {
    fn timeouts(&self) -> Result<ProtocolTimeouts, String> {
        let t = ProtocolTimeouts::with_interval(self.heartbeat_ms);
        t.validate().map_err(str::to_string)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, env = "EVONAS_EVALUATOR", value_enum, default_value_t = EvaluatorArg::Surrogate)]
    pub evaluator: EvaluatorArg,
    /// Module the surrogate landscape peaks at.
    #[arg(long, env = "EVONAS_TARGET", default_value = "5x5conv2d:64")]
    pub target: String,
    /// Sleep per evaluation for the delay evaluator.
    #[arg(long, env = "EVONAS_DELAY_MS", default_value_t = 0)]
    pub delay_ms: u64,
    /// Training epochs requested from an external trainer.
    #[arg(long, env = "EVONAS_EPOCHS", default_value_t = 2)]
    pub epochs: u32,
}

impl EvalArgs {
    fn config(&self) -> Result<EvalConfig, String> {
        let space = SearchSpaceConfig::new(crate::evaluate::WORKER_MAX_LAYERS).expect("positive");
        let target = Genotype::parse(&normalize_genotype(&self.target), &space)
            .map_err(|e| format!("--target: {e}"))?;
        Ok(EvalConfig {
            evaluator_kind: self.evaluator.into(),
            target_key: target.key().into(),
            epochs: self.epochs,
            delay_ms: self.delay_ms,
            ..EvalConfig::default()
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct ShapeArgs {
    /// Number of reduction modules.
    #[arg(long, env = "EVONAS_REDUCTIONS", default_value_t = 2)]
    pub reductions: u32,
    /// Input image shape, HxWxC.
    #[arg(long, env = "EVONAS_INPUT_SHAPE", default_value = "96x96x3")]
    pub input_shape: String,
}

impl ShapeArgs {
    fn build_config(&self) -> Result<BuildConfig, String> {
        let shape: TensorShape = self
            .input_shape
            .parse()
            .map_err(|e| format!("--input-shape: {e}"))?;
        Ok(BuildConfig::new(shape, self.reductions))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeedArgs {
    /// Random seed. Drawn from the OS when absent and always printed.
    #[arg(long, env = "EVONAS_SEED")]
    pub seed: Option<u64>,
}

impl SeedArgs {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let id = uuid::Uuid::new_v4();
            u64::from_le_bytes(id.as_bytes()[..8].try_into().expect("8 bytes"))
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct DispatchArgs {
    /// Find a broker through this nameserver instead of evaluating in process.
    #[arg(long, env = "EVONAS_NAMESERVER", conflicts_with = "broker")]
    pub nameserver: Option<String>,
    /// Use this broker directly instead of evaluating in process.
    #[arg(long, env = "EVONAS_BROKER")]
    pub broker: Option<String>,
    /// Abort a generation after this many seconds without a result.
    #[arg(long, env = "EVONAS_DISPATCH_TIMEOUT_S", default_value_t = 600)]
    pub dispatch_timeout_s: u64,
    #[command(flatten)]
    pub timing: TimingArgs,
}

impl DispatchArgs {
    fn dispatcher(&self) -> Result<Box<dyn Dispatcher>, String> {
        let endpoint = match (&self.nameserver, &self.broker) {
            (Some(ns), _) => Endpoint::Nameserver(ns.clone()),
            (None, Some(b)) => Endpoint::Broker(b.clone()),
            (None, None) => return Ok(Box::new(LoopbackDispatcher)),
        };
        let mut d = BrokeredDispatcher::new(endpoint, self.timing.timeouts()?);
        d.progress_timeout = Duration::from_secs(self.dispatch_timeout_s.max(1));
        Ok(Box::new(d))
    }
}

#[derive(Debug, Clone, Args)]
pub struct NameserverArgs {
    #[arg(long, env = "EVONAS_LISTEN", default_value = "0.0.0.0:9090")]
    pub listen: String,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BrokerArgs {
    #[arg(long, env = "EVONAS_LISTEN", default_value = "0.0.0.0:9091")]
    pub listen: String,
    /// Register here and discover peers.
    #[arg(long, env = "EVONAS_NAMESERVER")]
    pub nameserver: Option<String>,
    /// Generated when absent.
    #[arg(long, env = "EVONAS_BROKER_ID")]
    pub broker_id: Option<String>,
    /// Address given to the nameserver and peers. Defaults to the bound one.
    #[arg(long, env = "EVONAS_ADVERTISE")]
    pub advertise: Option<String>,
    /// Peer broker to link with; repeatable.
    #[arg(long = "link")]
    pub links: Vec<String>,
    /// Share tasks once the owned queue exceeds this many per waiting worker.
    #[arg(long, env = "EVONAS_SHARE_FACTOR", default_value_t = 2)]
    pub share_factor: usize,
    /// Do not link with brokers found through the nameserver.
    #[arg(long)]
    pub no_auto_link: bool,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct WorkerArgs {
    #[arg(long, env = "EVONAS_NAMESERVER", conflicts_with = "broker", required_unless_present = "broker")]
    pub nameserver: Option<String>,
    #[arg(long, env = "EVONAS_BROKER")]
    pub broker: Option<String>,
    /// Generated when absent.
    #[arg(long, env = "EVONAS_WORKER_ID")]
    pub worker_id: Option<String>,
    /// Exit after returning this many results.
    #[arg(long)]
    pub max_tasks: Option<u64>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvolutionArgs {
    /// Parent population size.
    #[arg(long, env = "EVONAS_MU", default_value_t = 10)]
    pub mu: usize,
    #[arg(long, env = "EVONAS_GENERATIONS", default_value_t = 20)]
    pub generations: u32,
    #[arg(long, env = "EVONAS_MAX_LAYERS", default_value_t = 10)]
    pub max_layers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub seed: SeedArgs,
    #[command(flatten)]
    pub evolution: EvolutionArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[command(flatten)]
    pub dispatch: DispatchArgs,
    /// Write the per-generation CSV here instead of stdout.
    #[arg(long, env = "EVONAS_CSV_OUT")]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RandomSearchArgs {
    #[command(flatten)]
    pub seed: SeedArgs,
    #[arg(long, default_value_t = 30)]
    pub samples: usize,
    #[arg(long, env = "EVONAS_MAX_LAYERS", default_value_t = 10)]
    pub max_layers: usize,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub dispatch: DispatchArgs,
    #[arg(long, env = "EVONAS_CSV_OUT")]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DescribeArgs {
    /// Layer module, e.g. "3x3conv2d:32,dropout2d". The "64-5x5conv2d" table
    /// notation is accepted too.
    pub genotype: String,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, env = "EVONAS_MAX_LAYERS", default_value_t = 10)]
    pub max_layers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScalingArgs {
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Worker counts to measure, in order.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub workers: Vec<usize>,
    #[arg(long, env = "EVONAS_DELAY_MS", default_value_t = 200)]
    pub delay_ms: u64,
    /// Length of one measurement window.
    #[arg(long, default_value_t = 2000)]
    pub window_ms: u64,
    #[arg(long, default_value_t = 5)]
    pub windows: usize,
    /// Executable to start workers from. Defaults to this one.
    #[arg(long)]
    pub worker_exe: Option<PathBuf>,
    #[arg(long, env = "EVONAS_CSV_OUT")]
    pub csv_out: Option<PathBuf>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[command(flatten)]
    pub seed: SeedArgs,
}

/// Rewrites table notation (`64-5x5conv2d`) into the canonical token form.
pub fn normalize_genotype(text: &str) -> String {
    text.split(',')
        .map(|tok| {
            let tok = tok.trim();
            match tok.split_once('-') {
                Some((filters, kind)) if !filters.is_empty() && filters.bytes().all(|b| b.is_ascii_digit()) => {
                    format!("{kind}:{filters}")
                }
                _ => tok.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Nameserver(a) => cmd_nameserver(&a),
        Command::Broker(a) => cmd_broker(&a),
        Command::Worker(a) => cmd_worker(&a),
        Command::Search(a) => cmd_search(&a),
        Command::RandomSearch(a) => cmd_random_search(&a),
        Command::Describe(a) => cmd_describe(&a),
        Command::ScalingTest(a) => cmd_scaling(&a),
        Command::Selftest(a) => cmd_selftest(&a),
    }
}

fn config_error(msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    EXIT_CONFIG
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || s.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    stop
}

fn wait_for_interrupt() {
    let stop = interrupt_flag();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<(), String> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_nameserver(a: &NameserverArgs) -> i32 {
    let timeouts = match a.timing.timeouts() {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let ns = match Nameserver::start(&a.listen, timeouts, Arc::new(MonotonicClock::new())) {
        Ok(ns) => ns,
        Err(e) => return config_error(format!("cannot listen on {}: {e}", a.listen)),
    };
    println!("nameserver listening on {}", ns.addr());
    wait_for_interrupt();
    drop(ns);
    EXIT_OK
}

fn cmd_broker(a: &BrokerArgs) -> i32 {
    let timeouts = match a.timing.timeouts() {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    if a.share_factor == 0 {
        return config_error("--share-factor must be positive");
    }
    let opts = BrokerOptions {
        listen: a.listen.clone(),
        broker_id: a.broker_id.clone(),
        advertise: a.advertise.clone(),
        nameserver: a.nameserver.clone(),
        timeouts,
        park_ms: None,
        share_factor: a.share_factor,
        links: a.links.clone(),
        auto_link: !a.no_auto_link,
    };
    let broker = match Broker::start(opts, Arc::new(MonotonicClock::new())) {
        Ok(b) => b,
        Err(e) => return config_error(format!("cannot start broker on {}: {e}", a.listen)),
    };
    println!("broker {} listening on {}", broker.id(), broker.address());
    wait_for_interrupt();
    drop(broker);
    EXIT_OK
}

fn cmd_worker(a: &WorkerArgs) -> i32 {
    let timeouts = match a.timing.timeouts() {
        Ok(t) => t,
        Err(e) => return config_error(e),
    };
    let discovery = match (&a.broker, &a.nameserver) {
        (Some(b), _) => Discovery::Broker(b.clone()),
        (None, Some(ns)) => Discovery::Nameserver(ns.clone()),
        (None, None) => return config_error("one of --broker or --nameserver is required"),
    };
    let mut cfg = WorkerConfig::new(discovery);
    cfg.timeouts = timeouts;
    cfg.max_tasks = a.max_tasks;
    if let Some(id) = &a.worker_id {
        cfg.worker_id = id.clone();
    }
    info!("starting {}", cfg.worker_id);
    let report = run_worker(&cfg, interrupt_flag());
    println!(
        "{}: {} tasks ({} errored), {} requests, {} no_task, {} reconnects",
        cfg.worker_id, report.tasks_done, report.errored, report.requests, report.no_tasks, report.reconnects
    );
    EXIT_OK
}

fn search_exit(e: &SearchError) -> i32 {
    eprintln!("error: {e}");
    match e {
        SearchError::Config(_) => EXIT_CONFIG,
        SearchError::Dispatch { .. } => EXIT_DISTRIBUTED,
    }
}

fn cmd_search(a: &SearchArgs) -> i32 {
    let seed = a.seed.resolve();
    println!("seed: {seed}");
    let evo = EvolutionConfig {
        mu: a.evolution.mu,
        max_num_layers: a.evolution.max_layers,
        num_generations: a.evolution.generations,
        rng_seed: seed,
    };
    if let Err(e) = evo.validate() {
        return config_error(e);
    }
    let (eval, build) = match (a.eval.config(), a.shape.build_config()) {
        (Ok(e), Ok(b)) => (e, b),
        (Err(e), _) | (_, Err(e)) => return config_error(e),
    };
    let mut dispatcher = match a.dispatch.dispatcher() {
        Ok(d) => d,
        Err(e) => return config_error(e),
    };
    let result = run_search_observed(&evo, &eval, dispatcher.as_mut(), &mut |s| {
        info!(
            "generation {}: best {:.4} mean {:.4} dispatched {}",
            s.generation, s.best_fitness, s.mean_fitness, s.dispatched
        );
    });
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if let SearchError::Dispatch { partial, .. } = &e {
                if !partial.stats.is_empty() {
                    let _ = write_output(a.csv_out.as_ref(), &partial.to_csv());
                }
            }
            return search_exit(&e);
        }
    };
    if let Err(e) = write_output(a.csv_out.as_ref(), &report.to_csv()) {
        return config_error(e);
    }
    print!("{}", report.summary());
    if let Some(best) = report.best() {
        match build_plan(&best.genotype, &build) {
            Ok(plan) => println!(
                "best network: {} parameters, bottleneck {}, compression ratio {}",
                plan.total_params, plan.bottleneck_shape, plan.compression_ratio
            ),
            Err(e) => println!("best network: cannot build at this input shape ({e})"),
        }
    }
    EXIT_OK
}

fn cmd_random_search(a: &RandomSearchArgs) -> i32 {
    let seed = a.seed.resolve();
    println!("seed: {seed}");
    let evo = EvolutionConfig {
        max_num_layers: a.max_layers,
        rng_seed: seed,
        ..EvolutionConfig::default()
    };
    let eval = match a.eval.config() {
        Ok(e) => e,
        Err(e) => return config_error(e),
    };
    let mut dispatcher = match a.dispatch.dispatcher() {
        Ok(d) => d,
        Err(e) => return config_error(e),
    };
    match run_random_search(a.samples, &evo, &eval, dispatcher.as_mut()) {
        Ok(r) => {
            if let Err(e) = write_output(a.csv_out.as_ref(), &r.to_csv()) {
                return config_error(e);
            }
            print!("{}", r.summary());
            EXIT_OK
        }
        Err(e) => search_exit(&e),
    }
}

fn cmd_describe(a: &DescribeArgs) -> i32 {
    let Some(space) = SearchSpaceConfig::new(a.max_layers) else {
        return config_error("--max-layers must be at least 1");
    };
    let genotype = match Genotype::parse(&normalize_genotype(&a.genotype), &space) {
        Ok(g) => g,
        Err(e) => return config_error(e),
    };
    let build = match a.shape.build_config() {
        Ok(b) => b,
        Err(e) => return config_error(e),
    };
    let plan = match build_plan(&genotype, &build) {
        Ok(p) => p,
        Err(e) => return config_error(e),
    };
    println!("genotype: {genotype}");
    print!("{}", plan.to_report());
    println!("total params: {}", plan.total_params);
    println!("bottleneck: {}", plan.bottleneck_shape);
    println!("compression ratio: {}", plan.compression_ratio);
    EXIT_OK
}

fn cmd_scaling(a: &ScalingArgs) -> i32 {
    let seed = a.seed.resolve();
    println!("seed: {seed}");
    let exe = match a.worker_exe.clone().map_or_else(std::env::current_exe, Ok) {
        Ok(p) => p,
        Err(e) => return config_error(format!("cannot locate worker executable: {e}")),
    };
    let mut cfg = ScalingConfig::new(exe);
    cfg.worker_counts = a.workers.clone();
    cfg.delay_ms = a.delay_ms;
    cfg.window_ms = a.window_ms;
    cfg.windows = a.windows;
    cfg.heartbeat_ms = a.timing.heartbeat_ms;
    cfg.seed = seed;
    match run_scaling(&cfg) {
        Ok(rows) => {
            if let Err(e) = write_output(a.csv_out.as_ref(), &crate::scaling::to_csv(&rows)) {
                return config_error(e);
            }
            EXIT_OK
        }
        Err(e @ ScalingError::Config(_)) => config_error(e),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DISTRIBUTED
        }
    }
}

fn cmd_selftest(a: &SelftestArgs) -> i32 {
    let seed = a.seed.resolve();
    println!("seed: {seed}");
    let checks = crate::selftest::run(seed);
    let mut ok = true;
    for (name, result) in &checks {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                ok = false;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_CONFIG
    }
}
