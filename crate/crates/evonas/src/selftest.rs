//! End-to-end smoke check run by `evonas selftest`: a nameserver, a broker
//! and two worker threads in this process, compared against loopback.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use evonas_core::{EvalConfig, EvolutionConfig};

use crate::broker::{Broker, BrokerOptions};
use crate::clock::MonotonicClock;
use crate::driver::{run_search, BrokeredDispatcher, Endpoint, LoopbackDispatcher, SearchReport};
use crate::nameserver::Nameserver;
use crate::wire::{decode_frame, encode_frame, Message, ProtocolTimeouts};
use crate::worker::{run_worker, Discovery, WorkerConfig};

pub type Check = (&'static str, Result<(), String>);

fn small(seed: u64) -> EvolutionConfig {
    EvolutionConfig {
        num_generations: 5,
        rng_seed: seed,
        ..EvolutionConfig::default()
    }
}

fn loopback(seed: u64) -> Result<SearchReport, String> {
    run_search(&small(seed), &EvalConfig::default(), &mut LoopbackDispatcher).map_err(|e| e.to_string())
}

fn brokered(seed: u64) -> Result<SearchReport, String> {
    let timeouts = ProtocolTimeouts::with_interval(200);
    let clock = Arc::new(MonotonicClock::new());
    let ns = Nameserver::start("127.0.0.1:0", timeouts, clock.clone()).map_err(|e| e.to_string())?;
    let ns_addr = ns.addr().to_string();
    let broker = Broker::start(
        BrokerOptions {
            nameserver: Some(ns_addr.clone()),
            timeouts,
            ..BrokerOptions::default()
        },
        clock,
    )
    .map_err(|e| e.to_string())?;
    let stop = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..2)
        .map(|_| {
            let mut cfg = WorkerConfig::new(Discovery::Nameserver(ns_addr.clone()));
            cfg.timeouts = timeouts;
            let stop = stop.clone();
            thread::spawn(move || run_worker(&cfg, stop))
        })
        .collect();
    let mut dispatcher = BrokeredDispatcher::new(Endpoint::Nameserver(ns_addr), timeouts);
    let result = run_search(&small(seed), &EvalConfig::default(), &mut dispatcher).map_err(|e| e.to_string());
    stop.store(true, Ordering::SeqCst);
    for w in workers {
        let _ = w.join();
    }
    drop(broker);
    drop(ns);
    result
}

pub fn run(seed: u64) -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    let first = loopback(seed);
    checks.push((
        "loopback search is repeatable",
        match (&first, loopback(seed)) {
            (Ok(a), Ok(b)) if a.to_csv() == b.to_csv() => Ok(()),
            (Ok(_), Ok(_)) => Err("CSV differs between runs".into()),
            (Err(e), _) => Err(e.clone()),
            (_, Err(e)) => Err(e),
        },
    ));
    checks.push((
        "best fitness never drops",
        first.as_ref().map_err(|e| e.clone()).and_then(|r| {
            r.stats
                .windows(2)
                .all(|w| w[1].best_fitness >= w[0].best_fitness)
                .then_some(())
                .ok_or_else(|| "best fitness decreased".to_string())
        }),
    ));
    let msg = Message::heartbeat("selftest", Some("lease".into()));
    checks.push((
        "frame roundtrip",
        encode_frame(&msg)
            .map_err(|e| e.to_string())
            .and_then(|f| decode_frame(&f).map_err(|e| e.to_string()))
            .and_then(|m| if m == msg { Ok(()) } else { Err("decoded frame differs".into()) }),
    ));
    checks.push((
        "brokered search matches loopback",
        match (&first, brokered(seed)) {
            (Ok(a), Ok(b)) if a.without_timing() == b.without_timing() => Ok(()),
            (Ok(_), Ok(_)) => Err("reports differ".into()),
            (Err(e), _) => Err(e.clone()),
            (_, Err(e)) => Err(e),
        },
    ));
    checks
}
