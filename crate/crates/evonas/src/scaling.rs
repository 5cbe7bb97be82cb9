//! Throughput measurement: one in-process broker, N worker processes, and a
//! model that keeps the broker queue full of fixed-delay tasks.

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use evonas_core::rng::stream;
use evonas_core::{EvalConfig, EvaluatorKind, Genotype, SearchSpaceConfig};
use log::info;
use thiserror::Error;

use crate::broker::{Broker, BrokerOptions};
use crate::clock::MonotonicClock;
use crate::net::Connection;
use crate::wire::{Message, ProtocolTimeouts};

pub const SCALING_CSV_HEADER: &str = "workers,tasks_per_second,speedup";

/// Worker processes started from an `evonas` executable. Killed on drop.
pub struct WorkerProcesses {
    children: Vec<Child>,
}

impl WorkerProcesses {
    /// Starts `n` workers against `broker`. Worker output is discarded.
    pub fn spawn(exe: &Path, broker: &str, n: usize, heartbeat_ms: u64) -> io::Result<Self> {
        let mut procs = WorkerProcesses {
            children: Vec::with_capacity(n),
        };
        for i in 0..n {
            let child = Command::new(exe)
                .arg("worker")
                .arg("--broker")
                .arg(broker)
                .arg("--heartbeat-ms")
                .arg(heartbeat_ms.to_string())
                .arg("--worker-id")
                .arg(format!("worker-{i}-{}", uuid::Uuid::new_v4()))
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()?;
            procs.children.push(child);
        }
        Ok(procs)
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn pid(&self, index: usize) -> u32 {
        self.children[index].id()
    }

    /// SIGKILL on unix. The worker gets no chance to say goodbye.
    pub fn kill(&mut self, index: usize) -> io::Result<()> {
        let child = &mut self.children[index];
        child.kill()?;
        child.wait().map(|_| ())
    }

    pub fn kill_all(&mut self) {
        for c in &mut self.children {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for WorkerProcesses {
    fn drop(&mut self) {
        self.kill_all();
    }
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub worker_counts: Vec<usize>,
    pub delay_ms: u64,
    pub window_ms: u64,
    pub windows: usize,
    /// Minimum run-in before the first window; the first result from every
    /// worker is also awaited.
    pub warmup_ms: u64,
    pub heartbeat_ms: u64,
    pub worker_exe: PathBuf,
    pub seed: u64,
}

impl ScalingConfig {
    pub fn new(worker_exe: PathBuf) -> Self {
        ScalingConfig {
            worker_counts: vec![1, 2, 4, 8],
            delay_ms: 200,
            window_ms: 2000,
            windows: 5,
            warmup_ms: 500,
            heartbeat_ms: ProtocolTimeouts::default().heartbeat_interval_ms,
            worker_exe,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub workers: usize,
    pub window_counts: Vec<u64>,
    pub tasks_per_second: f64,
    pub speedup: f64,
}

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("invalid scaling config: {0}")]
    Config(&'static str),
    #[error("could not start workers from {path}: {source}")]
    Spawn { path: PathBuf, source: io::Error },
    #[error("broker failed: {0}")]
    Broker(io::Error),
    #[error("broker connection lost during measurement")]
    ConnectionLost,
    #[error("no results for {0} ms")]
    Stalled(u64),
}

/// Geometric mean; zero if any count is zero.
pub fn geometric_mean(counts: &[u64]) -> f64 {
    if counts.is_empty() || counts.contains(&0) {
        return 0.0;
    }
    let log_sum: f64 = counts.iter().map(|&c| (c as f64).ln()).sum();
    (log_sum / counts.len() as f64).exp()
}

pub fn to_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from(SCALING_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.3},{:.3}\n", r.workers, r.tasks_per_second, r.speedup));
    }
    out
}

/// Measures every worker count in turn. Speedup is relative to the first
/// row's throughput.
pub fn run_scaling(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>, ScalingError> {
    if cfg.worker_counts.is_empty() || cfg.worker_counts.contains(&0) {
        return Err(ScalingError::Config("worker counts must be positive"));
    }
    if cfg.windows == 0 || cfg.window_ms == 0 {
        return Err(ScalingError::Config("need at least one non-empty window"));
    }
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &n in &cfg.worker_counts {
        let counts = measure(cfg, n)?;
        let per_window = geometric_mean(&counts);
        let tps = per_window * 1000.0 / cfg.window_ms as f64;
        let base = rows.first().map_or(tps, |r| r.tasks_per_second);
        let speedup = if base > 0.0 { tps / base } else { 0.0 };
        info!("{n} workers: {counts:?} per window, {tps:.2} tasks/s, speedup {speedup:.2}");
        rows.push(ScalingRow {
            workers: n,
            window_counts: counts,
            tasks_per_second: tps,
            speedup,
        });
    }
    Ok(rows)
}

fn measure(cfg: &ScalingConfig, workers: usize) -> Result<Vec<u64>, ScalingError> {
    let timeouts = ProtocolTimeouts::with_interval(cfg.heartbeat_ms);
    let broker = Broker::start(
        BrokerOptions {
            timeouts,
            auto_link: false,
            ..BrokerOptions::default()
        },
        Arc::new(MonotonicClock::new()),
    )
    .map_err(ScalingError::Broker)?;
    let mut procs = WorkerProcesses::spawn(&cfg.worker_exe, broker.address(), workers, cfg.heartbeat_ms)
        .map_err(|source| ScalingError::Spawn {
            path: cfg.worker_exe.clone(),
            source,
        })?;
    let conn = Connection::connect(broker.address(), Duration::from_millis(timeouts.request_timeout_ms))
        .map_err(ScalingError::Broker)?;

    let eval = EvalConfig {
        evaluator_kind: EvaluatorKind::Delay,
        delay_ms: cfg.delay_ms,
        ..EvalConfig::default()
    };
    let space = SearchSpaceConfig::new(10).expect("positive");
    let mut rng = stream(cfg.seed, workers as u64);
    let target_outstanding = 4 * workers + 4;
    let mut outstanding: HashSet<String> = HashSet::new();
    let mut next_id = 0u64;
    let stall_ms = 10 * cfg.delay_ms.max(100) + timeouts.expiry_ms();

    let start = Instant::now();
    let mut seen_workers: HashSet<String> = HashSet::new();
    let mut windows_start: Option<Instant> = None;
    let mut counts = vec![0u64; cfg.windows];
    let mut last_result = Instant::now();
    loop {
        while outstanding.len() < target_outstanding {
            let task_id = format!("scale-{workers}-{next_id}");
            next_id += 1;
            let genotype = Genotype::random(&mut rng, &space);
            conn.send(&Message::SubmitTask {
                task_id: task_id.clone(),
                sender_id: "scaling-model".into(),
                genotype: genotype.key().into(),
                eval_config: eval.clone(),
                generation: 0,
            })
            .map_err(|_| ScalingError::ConnectionLost)?;
            outstanding.insert(task_id);
        }
        let msg = conn
            .recv_timeout(Duration::from_millis(10))
            .map_err(|_| ScalingError::ConnectionLost)?;
        let now = Instant::now();
        if let Some(Message::TaskResult { task_id, sender_id, .. }) = msg {
            if outstanding.remove(&task_id) {
                last_result = now;
                seen_workers.insert(sender_id);
                if let Some(ws) = windows_start {
                    let idx = (now - ws).as_millis() as u64 / cfg.window_ms;
                    if let Some(c) = counts.get_mut(idx as usize) {
                        *c += 1;
                    }
                }
            }
        }
        match windows_start {
            None => {
                if seen_workers.len() >= workers && start.elapsed().as_millis() as u64 >= cfg.warmup_ms {
                    windows_start = Some(now);
                }
            }
            Some(ws) => {
                if (now - ws).as_millis() as u64 >= cfg.window_ms * cfg.windows as u64 {
                    break;
                }
            }
        }
        if last_result.elapsed().as_millis() as u64 > stall_ms {
            return Err(ScalingError::Stalled(stall_ms));
        }
    }
    procs.kill_all();
    drop(conn);
    drop(broker);
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_mean_of_constant_is_constant() {
        assert!((geometric_mean(&[7, 7, 7]) - 7.0).abs() < 1e-12);
        assert!((geometric_mean(&[2, 8]) - 4.0).abs() < 1e-12);
        assert_eq!(geometric_mean(&[3, 0, 4]), 0.0);
        assert_eq!(geometric_mean(&[]), 0.0);
    }

    #[test]
    fn csv_has_stable_header() {
        let rows = [ScalingRow {
            workers: 1,
            window_counts: vec![10],
            tasks_per_second: 5.0,
            speedup: 1.0,
        }];
        assert_eq!(to_csv(&rows), "workers,tasks_per_second,speedup\n1,5.000,1.000\n");
    }

    #[test]
    fn missing_executable_is_a_spawn_failure() {
        let mut cfg = ScalingConfig::new(PathBuf::from("/nonexistent/evonas"));
        cfg.worker_counts = vec![1];
        assert!(matches!(run_scaling(&cfg), Err(ScalingError::Spawn { .. })));
    }

    #[test]
    fn rejects_empty_counts() {
        let mut cfg = ScalingConfig::new(PathBuf::from("evonas"));
        cfg.worker_counts.clear();
        assert!(matches!(run_scaling(&cfg), Err(ScalingError::Config(_))));
    }
}
