//! Worker loop: request a task, heartbeat while evaluating, return the
//! result, repeat. One task at a time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

use crate::evaluate::evaluate_task;
use crate::nameserver::query_brokers;
use crate::net::{Connection, Sender};
use crate::wire::{Message, ProtocolTimeouts, Role, WireError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Discovery {
    Broker(String),
    Nameserver(String),
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub discovery: Discovery,
    pub timeouts: ProtocolTimeouts,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
    /// Stop after this many results.
    pub max_tasks: Option<u64>,
}

impl WorkerConfig {
    pub fn new(discovery: Discovery) -> Self {
        WorkerConfig {
            worker_id: format!("worker-{}", uuid::Uuid::new_v4()),
            discovery,
            timeouts: ProtocolTimeouts::default(),
            backoff_initial_ms: 100,
            backoff_max_ms: 2000,
            max_tasks: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerReport {
    pub tasks_done: u64,
    pub errored: u64,
    pub requests: u64,
    pub no_tasks: u64,
    pub reconnects: u64,
    pub heartbeats: u64,
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("no broker reachable: {0}")]
    BrokerUnreachable(String),
}

/// Doubling delay between idle requests.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    initial: u64,
    max: u64,
    current: u64,
}

impl Backoff {
    pub fn new(initial: u64, max: u64) -> Self {
        Backoff {
            initial,
            max,
            current: initial,
        }
    }

    /// Delay to wait now; the next one doubles up to the cap.
    pub fn next_delay(&mut self) -> u64 {
        let d = self.current;
        self.current = (self.current * 2).min(self.max);
        d
    }

    pub fn reset(&mut self) {
        self.current = self.initial;
    }
}

type ActiveLease = Arc<Mutex<Option<(String, Sender)>>>;

/// Runs until `stop` is set (finishing any task in hand) or `max_tasks`
/// results have been returned.
pub fn run_worker(cfg: &WorkerConfig, stop: Arc<AtomicBool>) -> WorkerReport {
    let report = Arc::new(Mutex::new(WorkerReport::default()));
    let lease: ActiveLease = Arc::new(Mutex::new(None));
    let done = Arc::new(AtomicBool::new(false));
    let beat = {
        let lease = lease.clone();
        let done = done.clone();
        let report = report.clone();
        let worker_id = cfg.worker_id.clone();
        let interval = cfg.timeouts.heartbeat_interval_ms;
        thread::spawn(move || heartbeat_loop(&worker_id, interval, &lease, &done, &report))
    };

    let mut backoff = Backoff::new(cfg.backoff_initial_ms, cfg.backoff_max_ms);
    let mut conn: Option<Connection> = None;
    let reply_wait = Duration::from_millis(
        cfg.timeouts.heartbeat_interval_ms * 2 + cfg.timeouts.request_timeout_ms,
    );
    while !stop.load(Ordering::SeqCst) {
        if cfg
            .max_tasks
            .is_some_and(|m| report.lock().unwrap().tasks_done >= m)
        {
            break;
        }
        let Some(c) = conn.as_ref() else {
            match connect(cfg) {
                Ok(c) => {
                    info!("{} connected to {}", cfg.worker_id, c.peer());
                    conn = Some(c);
                }
                Err(e) => {
                    warn!("{}: {e}", cfg.worker_id);
                    report.lock().unwrap().reconnects += 1;
                    sleep_unless(&stop, backoff.next_delay());
                }
            }
            continue;
        };
        report.lock().unwrap().requests += 1;
        let request = Message::TaskRequest {
            sender_id: cfg.worker_id.clone(),
        };
        if c.send(&request).is_err() {
            conn = None;
            continue;
        }
        match await_assignment(c, reply_wait) {
            Ok(Some(Message::TaskAssignment {
                task_id,
                lease_id,
                genotype,
                eval_config,
                ..
            })) => {
                backoff.reset();
                *lease.lock().unwrap() = Some((lease_id.clone(), c.sender()));
                let outcome = evaluate_task(&genotype, &eval_config);
                *lease.lock().unwrap() = None;
                let msg = match outcome {
                    Ok(e) => Message::TaskResult {
                        task_id: task_id.clone(),
                        sender_id: cfg.worker_id.clone(),
                        lease_id: Some(lease_id),
                        fitness: e.fitness,
                        loss: e.loss,
                        eval_ms: e.eval_ms,
                        error: None,
                    },
                    Err(err) => {
                        warn!("{} task {task_id} failed: {err}", cfg.worker_id);
                        report.lock().unwrap().errored += 1;
                        Message::TaskResult {
                            task_id: task_id.clone(),
                            sender_id: cfg.worker_id.clone(),
                            lease_id: Some(lease_id),
                            fitness: 0.0,
                            loss: f64::MAX,
                            eval_ms: 0,
                            error: Some(err),
                        }
                    }
                };
                if c.send(&msg).is_err() {
                    warn!("{} lost the broker before returning {task_id}", cfg.worker_id);
                    conn = None;
                    continue;
                }
                report.lock().unwrap().tasks_done += 1;
                debug!("{} finished {task_id}", cfg.worker_id);
            }
            Ok(_) => {
                report.lock().unwrap().no_tasks += 1;
                sleep_unless(&stop, backoff.next_delay());
            }
            Err(e) => {
                debug!("{} dropping connection: {e}", cfg.worker_id);
                conn = None;
            }
        }
    }
    done.store(true, Ordering::SeqCst);
    let _ = beat.join();
    let out = report.lock().unwrap().clone();
    out
}

/// Waits for the reply to a task request, skipping acks of earlier frames.
/// `Ok(None)` stands for `no_task`.
fn await_assignment(conn: &Connection, wait: Duration) -> Result<Option<Message>, WireError> {
    loop {
        match conn.recv_timeout(wait)? {
            Some(m @ Message::TaskAssignment { .. }) => return Ok(Some(m)),
            Some(Message::NoTask) => return Ok(None),
            Some(other) => debug!("worker skipping {}", other.type_name()),
            None => return Err(WireError::BadEncoding("broker did not answer".into())),
        }
    }
}

fn connect(cfg: &WorkerConfig) -> Result<Connection, WorkerError> {
    let timeout = Duration::from_millis(cfg.timeouts.request_timeout_ms);
    let address = match &cfg.discovery {
        Discovery::Broker(a) => a.clone(),
        Discovery::Nameserver(ns) => query_brokers(ns, &cfg.worker_id, Role::Worker, timeout)
            .map_err(|e| WorkerError::BrokerUnreachable(format!("nameserver {ns}: {e}")))?
            .into_iter()
            .next()
            .ok_or_else(|| WorkerError::BrokerUnreachable(format!("nameserver {ns} lists no broker")))?
            .address,
    };
    Connection::connect(&address, timeout)
        .map_err(|e| WorkerError::BrokerUnreachable(format!("{address}: {e}")))
}

fn heartbeat_loop(
    worker_id: &str,
    interval_ms: u64,
    lease: &ActiveLease,
    done: &AtomicBool,
    report: &Mutex<WorkerReport>,
) {
    let step = Duration::from_millis(interval_ms.clamp(1, 20));
    let mut held: Option<String> = None;
    let mut since_beat = 0u64;
    while !done.load(Ordering::SeqCst) {
        thread::sleep(step);
        let current = lease.lock().unwrap().clone();
        match current {
            Some((lease_id, sender)) => {
                if held.as_deref() != Some(lease_id.as_str()) {
                    held = Some(lease_id.clone());
                    since_beat = 0;
                }
                since_beat += step.as_millis() as u64;
                if since_beat >= interval_ms {
                    since_beat = 0;
                    if sender
                        .send(&Message::heartbeat(worker_id, Some(lease_id)))
                        .is_ok()
                    {
                        report.lock().unwrap().heartbeats += 1;
                    }
                }
            }
            None => held = None,
        }
    }
}

fn sleep_unless(stop: &AtomicBool, ms: u64) {
    let mut left = ms;
    while left > 0 && !stop.load(Ordering::SeqCst) {
        let d = left.min(20);
        thread::sleep(Duration::from_millis(d));
        left -= d;
    }
}
