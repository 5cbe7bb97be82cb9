//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. A criterion name given on the command line runs
//! only the criteria whose names contain it.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;
#[path = "support/messages.rs"]
mod messages;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use evonas::broker::{Broker, BrokerOptions, EventKind};
use evonas::clock::{Clock, MonotonicClock};
use evonas::driver::{
    run_random_search, run_search, BrokeredDispatcher, Endpoint, LoopbackDispatcher, SearchReport,
};
use evonas::scaling::{run_scaling, ScalingConfig, WorkerProcesses};
use evonas::wire::{decode_frame, encode_frame, ProtocolTimeouts};
use evonas::worker::{run_worker, Discovery, WorkerConfig};
use evonas_core::network::Section;
use evonas_core::rng::{stream, Draw};
use evonas_core::{
    build_plan, crossover, module_distance, mutate_genotype, BuildConfig, EvalConfig,
    EvaluatorKind, EvolutionConfig, Genotype, LayerSpec, NetworkPlan, SearchSpaceConfig,
    TensorShape, CATALOG,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const EXE: &str = env!("CARGO_BIN_EXE_evonas");

// Pinned thresholds.
const SEEDS: u64 = 10;
const MIN_MEDIAN_RATIO: f64 = 5.0;
const GOOD_FITNESS: f64 = 5.0;
const MIN_GOOD_SEEDS: usize = 9;
const MIN_CACHE_SAVINGS: f64 = 0.25;
const SPEEDUP_FLOORS: [(usize, f64); 3] = [(2, 1.8), (4, 3.4), (8, 6.4)];
const PROPERTY_CASES: u32 = 10_000;
const FAULT_HEARTBEAT_MS: u64 = 200;
const FAULT_DELAY_MS: u64 = 100;
/// Allowance for frame delivery and the owner-thread tick.
const ROUND_TRIP_SLACK_MS: u64 = 50;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn paper_run(seed: u64) -> EvolutionConfig {
    EvolutionConfig {
        mu: 10,
        max_num_layers: 10,
        num_generations: 20,
        rng_seed: seed,
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn monotone(report: &SearchReport) -> bool {
    report
        .stats
        .windows(2)
        .all(|w| w[1].best_fitness >= w[0].best_fitness)
}

fn best(report: &SearchReport) -> f64 {
    report.stats.last().map_or(0.0, |s| s.best_fitness)
}

fn evolution_beats_random() -> Outcome {
    let mut evo = Vec::new();
    let mut random = Vec::new();
    for seed in 0..SEEDS {
        let cfg = paper_run(seed);
        let r = run_search(&cfg, &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())?;
        evo.push(best(&r));
        let b = run_random_search(30, &cfg, &EvalConfig::default(), &mut LoopbackDispatcher)
            .map_err(|e| e.to_string())?;
        random.push(b.best_fitness);
    }
    let (me, mr) = (median(&evo), median(&random));
    let ratio = me / mr;
    let good = evo.iter().filter(|&&f| f >= GOOD_FITNESS).count();
    let detail = format!(
        "median evolution {me:.3}, median random-30 {mr:.3}, ratio {ratio:.2} (>= {MIN_MEDIAN_RATIO}), \
         {good}/{SEEDS} seeds >= {GOOD_FITNESS} (>= {MIN_GOOD_SEEDS}); evolution {evo:.3?}; random {random:.3?}"
    );
    if ratio >= MIN_MEDIAN_RATIO && good >= MIN_GOOD_SEEDS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cache_savings() -> Outcome {
    let mut min_ratio = f64::INFINITY;
    let mut rows = 0;
    let mut three_mu_rows = 0;
    for seed in 0..SEEDS {
        let cfg = paper_run(seed);
        let r = run_search(&cfg, &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())?;
        for s in &r.stats[1..] {
            rows += 1;
            if s.skipped_evaluated != cfg.mu {
                return Err(format!(
                    "seed {seed} generation {}: {} members skipped, expected the {} parents",
                    s.generation, s.skipped_evaluated, cfg.mu
                ));
            }
            if s.dispatched + s.cache_hits + s.skipped_evaluated != s.population_size {
                return Err(format!("seed {seed} generation {}: counters do not add up", s.generation));
            }
            if s.population_size == 3 * cfg.mu {
                three_mu_rows += 1;
            }
            let ratio = (s.skipped_evaluated + s.cache_hits) as f64 / s.population_size as f64;
            min_ratio = min_ratio.min(ratio);
        }
    }
    let detail = format!(
        "min (skipped+hits)/population {min_ratio:.3} over {rows} generations (>= {MIN_CACHE_SAVINGS}); \
         parents skipped exactly in every generation, share 1/3 in the {three_mu_rows} generations of size 3mu"
    );
    if min_ratio >= MIN_CACHE_SAVINGS {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn elitism() -> Outcome {
    let mut runs = 0;
    for seed in 0..100 {
        let r = run_search(&paper_run(seed), &EvalConfig::default(), &mut LoopbackDispatcher)
            .map_err(|e| e.to_string())?;
        if !monotone(&r) {
            return Err(format!("seed {seed}: best fitness decreased"));
        }
        runs += 1;
    }
    Ok(format!("best_fitness non-decreasing in all {runs} runs"))
}

fn scaling() -> Outcome {
    let cfg = ScalingConfig::new(EXE.into());
    let rows = run_scaling(&cfg).map_err(|e| e.to_string())?;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{}w {:.2}/s x{:.2} {:?}", r.workers, r.tasks_per_second, r.speedup, r.window_counts))
        .collect();
    let mut ok = true;
    for (workers, floor) in SPEEDUP_FLOORS {
        let got = rows.iter().find(|r| r.workers == workers).map_or(0.0, |r| r.speedup);
        ok &= got >= floor;
    }
    let detail = format!("{} (floors 2:1.8 4:3.4 8:6.4)", summary.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    Kill,
    Freeze,
}

struct FaultRun {
    report: SearchReport,
    /// Broker-clock milliseconds from the fault to the victim task's next
    /// assignment.
    recovery_ms: Option<u64>,
}

fn fault_config() -> (EvolutionConfig, EvalConfig) {
    (
        EvolutionConfig {
            num_generations: 5,
            ..paper_run(17)
        },
        EvalConfig {
            evaluator_kind: EvaluatorKind::Delay,
            delay_ms: FAULT_DELAY_MS,
            ..EvalConfig::default()
        },
    )
}

fn brokered_with_processes(fault: Option<Fault>) -> Result<FaultRun, String> {
    let timeouts = ProtocolTimeouts::with_interval(FAULT_HEARTBEAT_MS);
    let clock = Arc::new(MonotonicClock::new());
    let broker = Broker::start(
        BrokerOptions {
            timeouts,
            auto_link: false,
            ..BrokerOptions::default()
        },
        clock.clone(),
    )
    .map_err(|e| e.to_string())?;
    let mut procs = WorkerProcesses::spawn(EXE.as_ref(), broker.address(), 3, FAULT_HEARTBEAT_MS)
        .map_err(|e| e.to_string())?;
    let addr = broker.address().to_string();
    let search = thread::spawn(move || {
        let (evo, eval) = fault_config();
        let mut d = BrokeredDispatcher::new(Endpoint::Broker(addr), timeouts);
        run_search(&evo, &eval, &mut d).map_err(|e| e.to_string())
    });

    let mut victim: Option<(String, u64)> = None;
    if let Some(fault) = fault {
        let deadline = Instant::now() + Duration::from_secs(60);
        while victim.is_none() && Instant::now() < deadline && !search.is_finished() {
            let stats = broker.stats();
            if stats.completed >= 25 {
                let held = broker
                    .snapshot()
                    .and_then(|s| s.leased.into_iter().find(|(_, w)| w.starts_with("worker-0-")));
                if let Some((task, _)) = held {
                    let at = clock.now_ms();
                    match fault {
                        Fault::Kill => procs.kill(0).map_err(|e| e.to_string())?,
                        Fault::Freeze => {
                            let status = std::process::Command::new("kill")
                                .args(["-STOP", &procs.pid(0).to_string()])
                                .status()
                                .map_err(|e| e.to_string())?;
                            if !status.success() {
                                return Err("could not stop the worker".into());
                            }
                        }
                    }
                    victim = Some((task, at));
                }
            }
            thread::sleep(Duration::from_millis(2));
        }
        if victim.is_none() {
            return Err("no moment found to inject the fault".into());
        }
    }
    let report = search.join().map_err(|_| "search thread panicked".to_string())??;
    procs.kill_all();
    let recovery_ms = victim.and_then(|(task, at)| {
        let events = broker.snapshot()?.events;
        let expired = events.iter().position(|e| {
            e.at_ms >= at && matches!(&e.kind, EventKind::LeaseExpired { task_id, .. } if *task_id == task)
        })?;
        events[expired..].iter().find_map(|e| match &e.kind {
            EventKind::Assigned { task_id, .. } if *task_id == task => Some(e.at_ms - at),
            _ => None,
        })
    });
    if fault.is_some() && recovery_ms.is_none() {
        return Err("victim task was never reassigned".into());
    }
    Ok(FaultRun { report, recovery_ms })
}

fn fault_tolerance() -> Outcome {
    let bound = FAULT_HEARTBEAT_MS * u64::from(ProtocolTimeouts::default().heartbeat_misses_to_expire)
        + FAULT_DELAY_MS
        + ROUND_TRIP_SLACK_MS;
    let clean = brokered_with_processes(None)?;
    let killed = brokered_with_processes(Some(Fault::Kill))?;
    let frozen = brokered_with_processes(Some(Fault::Freeze))?;
    let (evo, _) = fault_config();
    let reference = run_search(&evo, &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for (name, run) in [("kill", &killed), ("freeze", &frozen)] {
        if run.report.without_timing() != clean.report.without_timing() {
            problems.push(format!("{name}: report differs from the unfaulted run"));
        }
        if run.recovery_ms.is_some_and(|ms| ms > bound) {
            problems.push(format!("{name}: recovery {:?} ms > {bound} ms", run.recovery_ms));
        }
    }
    if clean.report.without_timing() != reference.without_timing() {
        problems.push("unfaulted brokered run differs from loopback".into());
    }
    let detail = format!(
        "SIGKILL recovery {} ms, SIGSTOP recovery {} ms (bound {bound} ms = {FAULT_HEARTBEAT_MS}x3 + {FAULT_DELAY_MS} task + {ROUND_TRIP_SLACK_MS}); \
         best {} in all three runs",
        killed.recovery_ms.unwrap_or(0),
        frozen.recovery_ms.unwrap_or(0),
        clean.report.best().map_or(String::new(), |b| b.genotype.to_string()),
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn determinism() -> Outcome {
    for seed in 0..SEEDS {
        let a = run_search(&paper_run(seed), &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())?;
        let b = run_search(&paper_run(seed), &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())?;
        if a.to_csv().as_bytes() != b.to_csv().as_bytes() {
            return Err(format!("seed {seed}: loopback CSV differs between runs"));
        }
    }
    let timeouts = ProtocolTimeouts::with_interval(100);
    let broker = Broker::start(
        BrokerOptions {
            timeouts,
            auto_link: false,
            ..BrokerOptions::default()
        },
        Arc::new(MonotonicClock::new()),
    )
    .map_err(|e| e.to_string())?;
    let stop = Arc::new(AtomicBool::new(false));
    let worker = {
        let mut cfg = WorkerConfig::new(Discovery::Broker(broker.address().into()));
        cfg.timeouts = timeouts;
        let stop = stop.clone();
        thread::spawn(move || run_worker(&cfg, stop))
    };
    let mut compared = 0;
    let mut outcome = Ok(());
    for seed in 0..3 {
        let mut d = BrokeredDispatcher::new(Endpoint::Broker(broker.address().into()), timeouts);
        let remote = run_search(&paper_run(seed), &EvalConfig::default(), &mut d);
        let local = run_search(&paper_run(seed), &EvalConfig::default(), &mut LoopbackDispatcher);
        match (remote, local) {
            (Ok(r), Ok(l)) if r.without_timing() == l.without_timing() => compared += 1,
            (Ok(_), Ok(_)) => outcome = Err(format!("seed {seed}: single-worker brokered report differs")),
            (Err(e), _) | (_, Err(e)) => outcome = Err(e.to_string()),
        }
        if outcome.is_err() {
            break;
        }
    }
    stop.store(true, Ordering::SeqCst);
    let _ = worker.join();
    outcome?;
    Ok(format!(
        "loopback CSV byte-identical for {SEEDS} seeds; single-worker brokered equals loopback for {compared} seeds"
    ))
}

fn rows(plan: &NetworkPlan, section: Section) -> Vec<oracles::OracleRow> {
    let nodes = match section {
        Section::Encoder => &plan.encoder,
        Section::Decoder => &plan.decoder,
    };
    nodes
        .iter()
        .map(|n| {
            let s = |t: TensorShape| (t.height, t.width, t.channels);
            (n.op.to_string(), s(n.in_shape), s(n.out_shape), n.param_count)
        })
        .collect()
}

fn pick(rng: &mut dyn Draw, tokens: &[String]) -> Vec<String> {
    let len = 1 + rng.below(6);
    (0..len).map(|_| tokens[rng.below(tokens.len())].clone()).collect()
}

fn oracle_equivalence() -> Outcome {
    let modules = oracles::short_modules();
    let cfg = BuildConfig::new(TensorShape::new(96, 96, 3), 2);
    for m in &modules {
        let g: Genotype = m.parse().map_err(|e| format!("{m}: {e}"))?;
        let plan = build_plan(&g, &cfg).map_err(|e| format!("{m}: {e}"))?;
        let (enc, dec) = oracles::expected_plan(m, (96, 96, 3), 2);
        let total: usize = enc.iter().chain(&dec).map(|r| r.3).sum();
        if rows(&plan, Section::Encoder) != enc || rows(&plan, Section::Decoder) != dec || plan.total_params != total {
            return Err(format!("{m}: plan differs from the shape oracle"));
        }
    }
    let tokens = oracles::all_tokens();
    let mut rng = stream(2024, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (pick(&mut rng, &tokens), pick(&mut rng, &tokens));
        let parse = |v: &[String]| -> Vec<LayerSpec> {
            Genotype::parse(&v.join(","), &SearchSpaceConfig::default())
                .expect("catalog tokens")
                .layers()
                .to_vec()
        };
        let got = module_distance(&parse(&a), &parse(&b));
        let ra: Vec<&str> = a.iter().map(String::as_str).collect();
        let rb: Vec<&str> = b.iter().map(String::as_str).collect();
        let want = oracles::exhaustive_distance(&ra, &rb);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-9 {
            return Err(format!("distance {a:?} / {b:?}: {got} vs oracle {want}"));
        }
    }
    Ok(format!(
        "{} modules match the shape/parameter oracle; 1000 random pairs match exhaustive alignment (max error {worst:e})",
        modules.len()
    ))
}

fn property_suites() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let layers = prop::collection::vec(prop::sample::select(CATALOG.to_vec()), 1..=10);
    runner
        .run(&layers, |l| {
            let space = SearchSpaceConfig::default();
            let g = Genotype::new(l.clone(), &space).unwrap();
            let back = Genotype::parse(g.key(), &space).unwrap();
            prop_assert_eq!(back.layers(), &l[..]);
            prop_assert_eq!(&back, &g);
            Ok(())
        })
        .map_err(|e| format!("genotype roundtrip: {e}"))?;

    let pair = (layers.clone(), layers, any::<u64>());
    runner
        .run(&pair, |(a, b, seed)| {
            let space = SearchSpaceConfig::default();
            let (ga, gb) = (Genotype::new(a, &space).unwrap(), Genotype::new(b, &space).unwrap());
            let (ka, kb) = (ga.clone(), gb.clone());
            let mut rng = stream(seed, 1);
            let m = mutate_genotype(&ga, 10, &mut rng);
            let c = crossover(&ga, &gb, 10, &mut rng);
            prop_assert_eq!(&ga, &ka);
            prop_assert_eq!(&gb, &kb);
            prop_assert!(m.len() <= 10 && c.len() <= 10);
            Ok(())
        })
        .map_err(|e| format!("operator immutability: {e}"))?;

    runner
        .run(&messages::message(), |m| {
            let frame = encode_frame(&m).unwrap();
            prop_assert_eq!(decode_frame(&frame).unwrap(), m);
            Ok(())
        })
        .map_err(|e| format!("wire roundtrip: {e}"))?;
    Ok(format!(
        "genotype roundtrip, operator immutability and wire frame roundtrip each passed {PROPERTY_CASES} cases"
    ))
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 8] = [
        ("evolution_beats_random", evolution_beats_random),
        ("cache_savings", cache_savings),
        ("elitism", elitism),
        ("scaling", scaling),
        ("fault_tolerance", fault_tolerance),
        ("determinism", determinism),
        ("oracle_equivalence", oracle_equivalence),
        ("property_suites", property_suites),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
