//! Broker state machine. Every input carries the current time and returns the
//! frames to send; the server layer owns sockets and the clock.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use evonas_core::EvalConfig;
use log::{debug, info};
use thiserror::Error;

use crate::wire::{Message, ProtocolTimeouts};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct BrokerConfig {
    pub broker_id: String,
    pub timeouts: ProtocolTimeouts,
    /// How long a task request may wait for work before `no_task`.
    pub park_ms: u64,
    /// Share when the owned queue holds more than this many tasks per locally
    /// idle worker.
    pub share_factor: usize,
}

impl BrokerConfig {
    pub fn new(broker_id: impl Into<String>, timeouts: ProtocolTimeouts) -> Self {
        BrokerConfig {
            broker_id: broker_id.into(),
            park_ms: timeouts.heartbeat_interval_ms,
            timeouts,
            share_factor: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("task id {0} already submitted")]
    DuplicateTaskId(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub fitness: f64,
    pub loss: f64,
    pub eval_ms: u64,
    pub error: Option<String>,
    pub worker_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Owned { model: ConnId },
    Shared { peer: ConnId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TaskState {
    Queued,
    Leased(String),
    SharedOut(ConnId),
    Completed,
}

#[derive(Debug, Clone)]
struct Task {
    genotype: String,
    eval_config: EvalConfig,
    generation: u32,
    origin: Origin,
    state: TaskState,
    result: Option<TaskOutcome>,
}

#[derive(Debug, Clone)]
struct Lease {
    task_id: String,
    worker_id: String,
    conn: ConnId,
    last_heartbeat: u64,
}

#[derive(Debug, Clone)]
struct Parked {
    conn: ConnId,
    worker_id: String,
    since: u64,
}

#[derive(Debug, Clone)]
struct Peer {
    broker_id: String,
    idle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Model,
    Worker,
    Peer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerStats {
    pub submitted: u64,
    pub duplicate_submissions: u64,
    pub assigned: u64,
    pub completed: u64,
    pub duplicate_results: u64,
    pub unknown_results: u64,
    pub expired_leases: u64,
    pub revoked_leases: u64,
    pub no_task_replies: u64,
    pub shared_out: u64,
    pub shared_in: u64,
    pub reclaimed: u64,
    pub requeued_from_peer: u64,
    pub owned_queued: usize,
    pub shared_queued: usize,
    pub parked: usize,
    pub live_leases: usize,
    pub peers: usize,
    pub clients: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Assigned { task_id: String, worker_id: String, owned: bool },
    LeaseExpired { task_id: String, worker_id: String },
    LeaseRevoked { task_id: String, worker_id: String },
    Completed { task_id: String, worker_id: String },
    SharedOut { task_id: String, peer: String },
    Reclaimed { task_id: String, peer: String },
    RequeuedFromPeer { task_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerEvent {
    pub at_ms: u64,
    pub kind: EventKind,
}

const EVENT_LOG_LIMIT: usize = 100_000;

pub type Outbox = Vec<(ConnId, Message)>;

#[derive(Debug)]
pub struct BrokerCore {
    cfg: BrokerConfig,
    tasks: HashMap<String, Task>,
    owned_q: VecDeque<String>,
    shared_q: VecDeque<String>,
    leases: HashMap<String, Lease>,
    worker_lease: HashMap<String, String>,
    parked: VecDeque<Parked>,
    peers: BTreeMap<ConnId, Peer>,
    dialed: BTreeSet<ConnId>,
    roles: HashMap<ConnId, Role>,
    closed_models: BTreeSet<ConnId>,
    next_lease: u64,
    last_idle_report: Option<(u64, u32)>,
    stats: BrokerStats,
    events: Vec<BrokerEvent>,
}

impl BrokerCore {
    pub fn new(cfg: BrokerConfig) -> Self {
        BrokerCore {
            cfg,
            tasks: HashMap::new(),
            owned_q: VecDeque::new(),
            shared_q: VecDeque::new(),
            leases: HashMap::new(),
            worker_lease: HashMap::new(),
            parked: VecDeque::new(),
            peers: BTreeMap::new(),
            dialed: BTreeSet::new(),
            roles: HashMap::new(),
            closed_models: BTreeSet::new(),
            next_lease: 0,
            last_idle_report: None,
            stats: BrokerStats::default(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.cfg.broker_id
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> BrokerStats {
        let mut s = self.stats.clone();
        s.owned_queued = self.owned_q.len();
        s.shared_queued = self.shared_q.len();
        s.parked = self.parked.len();
        s.live_leases = self.leases.len();
        s.peers = self.peers.len();
        s.clients = self.client_count();
        s
    }

    pub fn events(&self) -> &[BrokerEvent] {
        &self.events
    }

    pub fn client_count(&self) -> usize {
        self.roles
            .values()
            .filter(|r| matches!(r, Role::Model | Role::Worker))
            .count()
    }

    pub fn peer_ids(&self) -> BTreeSet<String> {
        self.peers.values().map(|p| p.broker_id.clone()).collect()
    }

    /// Task ids currently leased, with their worker.
    pub fn leased_tasks(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .leases
            .values()
            .map(|l| (l.task_id.clone(), l.worker_id.clone()))
            .collect();
        out.sort();
        out
    }

    fn log(&mut self, at_ms: u64, kind: EventKind) {
        if self.events.len() >= EVENT_LOG_LIMIT {
            self.events.drain(..EVENT_LOG_LIMIT / 2);
        }
        self.events.push(BrokerEvent { at_ms, kind });
    }

    /// Handles one inbound frame from `conn`.
    pub fn handle(&mut self, conn: ConnId, msg: Message, now: u64) -> Outbox {
        let mut out = Outbox::new();
        match msg {
            Message::SubmitTask {
                task_id,
                genotype,
                eval_config,
                generation,
                ..
            } => match self.submit(conn, task_id, genotype, eval_config, generation, now) {
                Ok(o) => out = o,
                Err(e) => debug!("{}: {e}", self.cfg.broker_id),
            },
            Message::TaskRequest { sender_id } => self.request(conn, sender_id, now, &mut out),
            Message::Heartbeat {
                sender_id,
                lease_id,
                idle_workers,
                ..
            } => {
                if let Some(peer) = self.peers.get_mut(&conn) {
                    if let Some(idle) = idle_workers {
                        peer.idle = idle;
                    }
                    self.share(now, &mut out);
                } else if let Some(lease_id) = lease_id {
                    out.push((conn, self.worker_heartbeat(&sender_id, &lease_id, now)));
                } else {
                    out.push((conn, Message::HeartbeatAck { lease_id: None }));
                }
            }
            Message::TaskResult {
                task_id,
                sender_id,
                lease_id,
                fitness,
                loss,
                eval_ms,
                error,
            } => {
                let outcome = TaskOutcome {
                    fitness,
                    loss,
                    eval_ms,
                    error,
                    worker_id: sender_id,
                };
                if let Err(e) = self.complete(&task_id, outcome, now, &mut out) {
                    debug!("{}: {e}", self.cfg.broker_id);
                }
                out.push((conn, Message::HeartbeatAck { lease_id }));
                self.dispatch(now, &mut out);
            }
            Message::LinkRequest { sender_id, address } => {
                if sender_id == self.cfg.broker_id
                    || self.peers.values().any(|p| p.broker_id == sender_id)
                {
                    out.push((
                        conn,
                        Message::Reconnect {
                            reason: format!("already linked with {sender_id}"),
                        },
                    ));
                } else {
                    info!("{} linked with {sender_id} at {address}", self.cfg.broker_id);
                    self.add_peer(conn, sender_id);
                    out.push((
                        conn,
                        Message::LinkAccept {
                            sender_id: self.cfg.broker_id.clone(),
                        },
                    ));
                    out.push((conn, self.idle_report()));
                }
            }
            Message::LinkAccept { sender_id } => {
                if self.dialed.remove(&conn) {
                    info!("{} linked with {sender_id}", self.cfg.broker_id);
                    self.add_peer(conn, sender_id);
                    out.push((conn, self.idle_report()));
                }
            }
            Message::ShareTask {
                task_id,
                genotype,
                eval_config,
                generation,
                ..
            } => {
                if self.peers.contains_key(&conn) && !self.tasks.contains_key(&task_id) {
                    self.stats.shared_in += 1;
                    self.tasks.insert(
                        task_id.clone(),
                        Task {
                            genotype,
                            eval_config,
                            generation,
                            origin: Origin::Shared { peer: conn },
                            state: TaskState::Queued,
                            result: None,
                        },
                    );
                    self.shared_q.push_back(task_id);
                    self.dispatch(now, &mut out);
                }
            }
            Message::ReclaimTask {
                task_id,
                sender_id,
                fitness,
                loss,
                eval_ms,
                error,
            } => {
                let shared_here = matches!(
                    self.tasks.get(&task_id).map(|t| &t.state),
                    Some(TaskState::SharedOut(p)) if *p == conn
                );
                if shared_here {
                    self.stats.reclaimed += 1;
                    let peer = self
                        .peers
                        .get(&conn)
                        .map(|p| p.broker_id.clone())
                        .unwrap_or_default();
                    self.log(
                        now,
                        EventKind::Reclaimed {
                            task_id: task_id.clone(),
                            peer,
                        },
                    );
                }
                let outcome = TaskOutcome {
                    fitness,
                    loss,
                    eval_ms,
                    error,
                    worker_id: sender_id,
                };
                if let Err(e) = self.complete(&task_id, outcome, now, &mut out) {
                    debug!("{}: {e}", self.cfg.broker_id);
                }
            }
            other => debug!(
                "{} ignoring {} from {conn}",
                self.cfg.broker_id,
                other.type_name()
            ),
        }
        out
    }

    /// Queues a task from a model. A repeated id is refused unless the model
    /// that first sent it has disconnected, in which case the task is bound to
    /// the new connection (and its result re-sent if already known).
    pub fn submit(
        &mut self,
        conn: ConnId,
        task_id: String,
        genotype: String,
        eval_config: EvalConfig,
        generation: u32,
        now: u64,
    ) -> Result<Outbox, BrokerError> {
        self.roles.insert(conn, Role::Model);
        let mut out = Outbox::new();
        if let Some(task) = self.tasks.get_mut(&task_id) {
            let orphaned = match task.origin {
                Origin::Owned { model } => model != conn && self.closed_models.contains(&model),
                Origin::Shared { .. } => false,
            };
            self.stats.duplicate_submissions += 1;
            if !orphaned {
                return Err(BrokerError::DuplicateTaskId(task_id));
            }
            task.origin = Origin::Owned { model: conn };
            if let Some(result) = &task.result {
                out.push((conn, result_message(&task_id, result)));
            }
            return Ok(out);
        }
        self.stats.submitted += 1;
        self.tasks.insert(
            task_id.clone(),
            Task {
                genotype,
                eval_config,
                generation,
                origin: Origin::Owned { model: conn },
                state: TaskState::Queued,
                result: None,
            },
        );
        self.owned_q.push_back(task_id);
        self.dispatch(now, &mut out);
        self.share(now, &mut out);
        Ok(out)
    }

    fn request(&mut self, conn: ConnId, worker_id: String, now: u64, out: &mut Outbox) {
        self.roles.insert(conn, Role::Worker);
        // a worker asking again while holding a lease has restarted
        if let Some(lease_id) = self.worker_lease.get(&worker_id).cloned() {
            self.drop_lease(&lease_id, now, false);
        }
        if self.parked.iter().any(|p| p.conn == conn) {
            return;
        }
        self.parked.push_back(Parked {
            conn,
            worker_id,
            since: now,
        });
        self.dispatch(now, out);
        self.report_idle(now, out);
    }

    fn worker_heartbeat(&mut self, worker_id: &str, lease_id: &str, now: u64) -> Message {
        match self.leases.get_mut(lease_id) {
            Some(lease) if lease.worker_id == worker_id => {
                lease.last_heartbeat = now;
                Message::HeartbeatAck {
                    lease_id: Some(lease_id.into()),
                }
            }
            _ => Message::Reconnect {
                reason: format!("lease {lease_id} is not held by {worker_id}"),
            },
        }
    }

    /// Records a result. The first result for a task wins, whichever lease it
    /// came from; later ones are counted and dropped.
    pub fn complete(
        &mut self,
        task_id: &str,
        outcome: TaskOutcome,
        now: u64,
        out: &mut Outbox,
    ) -> Result<(), BrokerError> {
        let Some(task) = self.tasks.get(task_id) else {
            self.stats.unknown_results += 1;
            return Err(BrokerError::UnknownTask(task_id.into()));
        };
        if task.state == TaskState::Completed {
            self.stats.duplicate_results += 1;
            return Ok(());
        }
        match task.state.clone() {
            TaskState::Queued => {
                self.owned_q.retain(|t| t != task_id);
                self.shared_q.retain(|t| t != task_id);
            }
            TaskState::Leased(lease_id) => {
                if let Some(lease) = self.leases.remove(&lease_id) {
                    self.worker_lease.remove(&lease.worker_id);
                }
            }
            TaskState::SharedOut(_) | TaskState::Completed => {}
        }
        self.stats.completed += 1;
        self.log(
            now,
            EventKind::Completed {
                task_id: task_id.into(),
                worker_id: outcome.worker_id.clone(),
            },
        );
        let task = self.tasks.get_mut(task_id).expect("checked above");
        task.state = TaskState::Completed;
        match task.origin {
            Origin::Owned { model } => {
                out.push((model, result_message(task_id, &outcome)));
                task.result = Some(outcome);
            }
            Origin::Shared { peer } => {
                if self.peers.contains_key(&peer) {
                    out.push((
                        peer,
                        Message::ReclaimTask {
                            task_id: task_id.into(),
                            sender_id: self.cfg.broker_id.clone(),
                            fitness: outcome.fitness,
                            loss: outcome.loss,
                            eval_ms: outcome.eval_ms,
                            error: outcome.error,
                        },
                    ));
                }
                self.tasks.remove(task_id);
            }
        }
        Ok(())
    }

    /// Periodic work: lease expiry, long-poll timeouts, sharing and idle
    /// reports to peers.
    pub fn tick(&mut self, now: u64) -> Outbox {
        let mut out = Outbox::new();
        let expiry = self.cfg.timeouts.expiry_ms();
        let mut stale: Vec<String> = self
            .leases
            .iter()
            .filter(|(_, l)| now.saturating_sub(l.last_heartbeat) > expiry)
            .map(|(id, _)| id.clone())
            .collect();
        stale.sort();
        for lease_id in stale {
            self.drop_lease(&lease_id, now, true);
        }
        while let Some(p) = self.parked.front() {
            if now.saturating_sub(p.since) < self.cfg.park_ms {
                break;
            }
            let p = self.parked.pop_front().expect("front exists");
            self.stats.no_task_replies += 1;
            out.push((p.conn, Message::NoTask));
        }
        self.dispatch(now, &mut out);
        self.share(now, &mut out);
        self.report_idle(now, &mut out);
        out
    }

    /// Connection `conn` was opened by dialing a peer broker; `address` is
    /// where this broker can be reached.
    pub fn dialed(&mut self, conn: ConnId, address: String) -> Outbox {
        self.dialed.insert(conn);
        vec![(
            conn,
            Message::LinkRequest {
                sender_id: self.cfg.broker_id.clone(),
                address,
            },
        )]
    }

    /// Connection `conn` is gone. Its leases end now rather than at heartbeat
    /// expiry; tasks shared to a lost peer come home.
    pub fn closed(&mut self, conn: ConnId, now: u64) -> Outbox {
        let mut out = Outbox::new();
        self.dialed.remove(&conn);
        self.parked.retain(|p| p.conn != conn);
        let mut held: Vec<String> = self
            .leases
            .iter()
            .filter(|(_, l)| l.conn == conn)
            .map(|(id, _)| id.clone())
            .collect();
        held.sort();
        for lease_id in held {
            self.drop_lease(&lease_id, now, true);
        }
        if let Some(peer) = self.peers.remove(&conn) {
            info!("{} lost link to {}", self.cfg.broker_id, peer.broker_id);
            let mut returned: Vec<String> = self
                .tasks
                .iter()
                .filter(|(_, t)| t.state == TaskState::SharedOut(conn))
                .map(|(id, _)| id.clone())
                .collect();
            returned.sort();
            for task_id in returned.into_iter().rev() {
                self.stats.requeued_from_peer += 1;
                self.log(
                    now,
                    EventKind::RequeuedFromPeer {
                        task_id: task_id.clone(),
                    },
                );
                self.tasks.get_mut(&task_id).expect("listed").state = TaskState::Queued;
                self.owned_q.push_front(task_id);
            }
            // tasks the peer gave us are its responsibility again
            let foreign: Vec<String> = self
                .tasks
                .iter()
                .filter(|(_, t)| t.origin == Origin::Shared { peer: conn })
                .map(|(id, _)| id.clone())
                .collect();
            for task_id in foreign {
                if let Some(TaskState::Leased(lease_id)) =
                    self.tasks.get(&task_id).map(|t| t.state.clone())
                {
                    if let Some(lease) = self.leases.remove(&lease_id) {
                        self.worker_lease.remove(&lease.worker_id);
                    }
                }
                self.shared_q.retain(|t| *t != task_id);
                self.tasks.remove(&task_id);
            }
        }
        if self.roles.remove(&conn) == Some(Role::Model) {
            self.closed_models.insert(conn);
        }
        self.dispatch(now, &mut out);
        out
    }

    fn add_peer(&mut self, conn: ConnId, broker_id: String) {
        self.roles.insert(conn, Role::Peer);
        self.peers.insert(conn, Peer { broker_id, idle: 0 });
    }

    fn idle_report(&self) -> Message {
        Message::Heartbeat {
            sender_id: self.cfg.broker_id.clone(),
            lease_id: None,
            idle_workers: Some(self.parked.len() as u32),
            clients: None,
        }
    }

    fn report_idle(&mut self, now: u64, out: &mut Outbox) {
        if self.peers.is_empty() {
            return;
        }
        let idle = self.parked.len() as u32;
        let due = match self.last_idle_report {
            None => true,
            Some((at, last)) => {
                now.saturating_sub(at) >= self.cfg.timeouts.heartbeat_interval_ms
                    || (last == 0 && idle > 0)
            }
        };
        if due {
            self.last_idle_report = Some((now, idle));
            let msg = self.idle_report();
            for &conn in self.peers.keys() {
                out.push((conn, msg.clone()));
            }
        }
    }

    /// Ends a lease and puts its task back at the front of its queue.
    fn drop_lease(&mut self, lease_id: &str, now: u64, expired: bool) {
        let Some(lease) = self.leases.remove(lease_id) else {
            return;
        };
        self.worker_lease.remove(&lease.worker_id);
        let kind = if expired {
            self.stats.expired_leases += 1;
            EventKind::LeaseExpired {
                task_id: lease.task_id.clone(),
                worker_id: lease.worker_id.clone(),
            }
        } else {
            self.stats.revoked_leases += 1;
            EventKind::LeaseRevoked {
                task_id: lease.task_id.clone(),
                worker_id: lease.worker_id.clone(),
            }
        };
        info!(
            "{} requeues {} from {} ({})",
            self.cfg.broker_id,
            lease.task_id,
            lease.worker_id,
            if expired { "expired" } else { "revoked" }
        );
        self.log(now, kind);
        if let Some(task) = self.tasks.get_mut(&lease.task_id) {
            if task.state == TaskState::Leased(lease_id.into()) {
                task.state = TaskState::Queued;
                match task.origin {
                    Origin::Owned { .. } => self.owned_q.push_front(lease.task_id),
                    Origin::Shared { .. } => self.shared_q.push_front(lease.task_id),
                }
            }
        }
    }

    /// Hands queued work to parked workers, longest-waiting first, owned tasks
    /// before shared ones.
    fn dispatch(&mut self, now: u64, out: &mut Outbox) {
        while !self.parked.is_empty() {
            let (task_id, owned) = if let Some(t) = self.owned_q.pop_front() {
                (t, true)
            } else if let Some(t) = self.shared_q.pop_front() {
                (t, false)
            } else {
                break;
            };
            let worker = self.parked.pop_front().expect("non-empty");
            self.next_lease += 1;
            let lease_id = format!("{}:{}", self.cfg.broker_id, self.next_lease);
            let task = self.tasks.get_mut(&task_id).expect("queued task exists");
            task.state = TaskState::Leased(lease_id.clone());
            out.push((
                worker.conn,
                Message::TaskAssignment {
                    task_id: task_id.clone(),
                    lease_id: lease_id.clone(),
                    genotype: task.genotype.clone(),
                    eval_config: task.eval_config.clone(),
                    generation: task.generation,
                    owned,
                },
            ));
            self.leases.insert(
                lease_id.clone(),
                Lease {
                    task_id: task_id.clone(),
                    worker_id: worker.worker_id.clone(),
                    conn: worker.conn,
                    last_heartbeat: now,
                },
            );
            self.worker_lease.insert(worker.worker_id.clone(), lease_id);
            self.stats.assigned += 1;
            self.log(
                now,
                EventKind::Assigned {
                    task_id,
                    worker_id: worker.worker_id,
                    owned,
                },
            );
        }
    }

    /// Moves owned backlog to peers that report idle workers. Only owned tasks
    /// travel, so a task is never shared twice.
    fn share(&mut self, now: u64, out: &mut Outbox) {
        if self.peers.is_empty() {
            return;
        }
        let peers: Vec<ConnId> = self.peers.keys().copied().collect();
        for conn in peers {
            loop {
                let idle_here = self.parked.len();
                let peer_idle = self.peers[&conn].idle;
                if peer_idle == 0 || self.owned_q.len() <= self.cfg.share_factor * idle_here {
                    break;
                }
                let task_id = self.owned_q.pop_back().expect("non-empty");
                let task = self.tasks.get_mut(&task_id).expect("queued task exists");
                task.state = TaskState::SharedOut(conn);
                out.push((
                    conn,
                    Message::ShareTask {
                        task_id: task_id.clone(),
                        sender_id: self.cfg.broker_id.clone(),
                        genotype: task.genotype.clone(),
                        eval_config: task.eval_config.clone(),
                        generation: task.generation,
                    },
                ));
                let peer = self.peers.get_mut(&conn).expect("listed");
                peer.idle -= 1;
                let peer_id = peer.broker_id.clone();
                self.stats.shared_out += 1;
                self.log(
                    now,
                    EventKind::SharedOut {
                        task_id,
                        peer: peer_id,
                    },
                );
            }
        }
    }
}

fn result_message(task_id: &str, outcome: &TaskOutcome) -> Message {
    Message::TaskResult {
        task_id: task_id.into(),
        sender_id: outcome.worker_id.clone(),
        lease_id: None,
        fitness: outcome.fitness,
        loss: outcome.loss,
        eval_ms: outcome.eval_ms,
        error: outcome.error.clone(),
    }
}
