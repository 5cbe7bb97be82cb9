//! Broker registry with heartbeat expiry.
//!
//! [`Registry`] is a plain state machine fed with timestamps; [`Nameserver`]
//! puts it behind a TCP listener. Records whose last heartbeat is older than
//! the expiry window are swept lazily on every request and by a timer.

use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

use crate::clock::Clock;
use crate::wire::{read_message, write_message, BrokerEntry, Message, ProtocolTimeouts, Role, WireError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerRecord {
    pub broker_id: String,
    pub address: String,
    pub registered_at: u64,
    pub last_heartbeat: u64,
    pub clients: Option<u32>,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("address {address} already registered by {holder}")]
    AddressConflict { address: String, holder: String },
    #[error("malformed address `{0}`")]
    BadAddress(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeartbeatReply {
    Ack,
    Reconnect,
}

#[derive(Debug, Clone)]
pub struct Registry {
    records: BTreeMap<String, BrokerRecord>,
    expiry_ms: u64,
    next_seq: u64,
}

fn well_formed(address: &str) -> bool {
    match address.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && port.parse::<u16>().is_ok(),
        None => false,
    }
}

impl Registry {
    pub fn new(timeouts: ProtocolTimeouts) -> Self {
        Registry {
            records: BTreeMap::new(),
            expiry_ms: timeouts.expiry_ms(),
            next_seq: 0,
        }
    }

    fn live(&self, record: &BrokerRecord, now_ms: u64) -> bool {
        now_ms.saturating_sub(record.last_heartbeat) <= self.expiry_ms
    }

    /// Drops every record whose heartbeat is outside the window.
    pub fn sweep(&mut self, now_ms: u64) -> Vec<String> {
        let expired: Vec<String> = self
            .records
            .values()
            .filter(|r| !self.live(r, now_ms))
            .map(|r| r.broker_id.clone())
            .collect();
        for id in &expired {
            self.records.remove(id);
        }
        expired
    }

    pub fn register(
        &mut self,
        broker_id: &str,
        address: &str,
        clients: Option<u32>,
        now_ms: u64,
    ) -> Result<(), RegistryError> {
        self.sweep(now_ms);
        if !well_formed(address) {
            return Err(RegistryError::BadAddress(address.into()));
        }
        if let Some(holder) = self
            .records
            .values()
            .find(|r| r.address == address && r.broker_id != broker_id)
        {
            return Err(RegistryError::AddressConflict {
                address: address.into(),
                holder: holder.broker_id.clone(),
            });
        }
        match self.records.get_mut(broker_id) {
            Some(r) => {
                r.address = address.into();
                r.last_heartbeat = now_ms;
                r.clients = clients.or(r.clients);
            }
            None => {
                self.next_seq += 1;
                self.records.insert(
                    broker_id.into(),
                    BrokerRecord {
                        broker_id: broker_id.into(),
                        address: address.into(),
                        registered_at: now_ms,
                        last_heartbeat: now_ms,
                        clients,
                        seq: self.next_seq,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn heartbeat(&mut self, broker_id: &str, clients: Option<u32>, now_ms: u64) -> HeartbeatReply {
        self.sweep(now_ms);
        match self.records.get_mut(broker_id) {
            Some(r) => {
                r.last_heartbeat = now_ms;
                if clients.is_some() {
                    r.clients = clients;
                }
                HeartbeatReply::Ack
            }
            None => HeartbeatReply::Reconnect,
        }
    }

    /// Live brokers. Workers and models get them least-loaded first when every
    /// broker reports a client count, otherwise in registration order. A broker
    /// asking never sees itself.
    pub fn lookup(&mut self, requester: &str, role: Role, now_ms: u64) -> Vec<BrokerEntry> {
        self.sweep(now_ms);
        let mut live: Vec<&BrokerRecord> = self
            .records
            .values()
            .filter(|r| !(role == Role::Broker && r.broker_id == requester))
            .collect();
        live.sort_by_key(|r| r.seq);
        if role != Role::Broker && live.iter().all(|r| r.clients.is_some()) {
            live.sort_by_key(|r| (r.clients, r.seq));
        }
        live.into_iter()
            .map(|r| BrokerEntry {
                broker_id: r.broker_id.clone(),
                address: r.address.clone(),
                clients: r.clients,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, broker_id: &str) -> Option<&BrokerRecord> {
        self.records.get(broker_id)
    }
}

/// Reply to one request frame.
pub fn respond(registry: &mut Registry, msg: Message, now_ms: u64) -> Option<Message> {
    match msg {
        Message::RegisterBroker {
            sender_id,
            address,
            clients,
        } => Some(match registry.register(&sender_id, &address, clients, now_ms) {
            Ok(()) => Message::HeartbeatAck { lease_id: None },
            Err(e) => Message::Reconnect {
                reason: e.to_string(),
            },
        }),
        Message::Heartbeat {
            sender_id, clients, ..
        } => Some(match registry.heartbeat(&sender_id, clients, now_ms) {
            HeartbeatReply::Ack => Message::HeartbeatAck { lease_id: None },
            HeartbeatReply::Reconnect => Message::Reconnect {
                reason: format!("{sender_id} is not registered"),
            },
        }),
        Message::BrokerListRequest { sender_id, role } => Some(Message::BrokerList {
            brokers: registry.lookup(&sender_id, role, now_ms),
        }),
        other => {
            debug!("nameserver ignoring {}", other.type_name());
            None
        }
    }
}

struct Shared {
    registry: Mutex<Registry>,
    clock: Arc<dyn Clock>,
    stop: AtomicBool,
}

/// Running nameserver. Dropping the handle stops it.
pub struct Nameserver {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Nameserver {
    pub fn start(
        listen: &str,
        timeouts: ProtocolTimeouts,
        clock: Arc<dyn Clock>,
    ) -> io::Result<Nameserver> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            registry: Mutex::new(Registry::new(timeouts)),
            clock,
            stop: AtomicBool::new(false),
        });
        info!("nameserver listening on {addr}");

        let accept_shared = shared.clone();
        let acceptor = thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(stream) => {
                        let s = accept_shared.clone();
                        thread::spawn(move || serve(stream, s));
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        });

        let sweep_shared = shared.clone();
        let period = Duration::from_millis(timeouts.heartbeat_interval_ms.max(1));
        let sweeper = thread::spawn(move || {
            while !sweep_shared.stop.load(Ordering::SeqCst) {
                thread::sleep(period.min(Duration::from_millis(100)));
                let now = sweep_shared.clock.now_ms();
                for id in sweep_shared.registry.lock().unwrap().sweep(now) {
                    info!("broker {id} expired");
                }
            }
        });

        Ok(Nameserver {
            addr,
            shared,
            threads: vec![acceptor, sweeper],
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Snapshot of the registry.
    pub fn registry(&self) -> Registry {
        self.shared.registry.lock().unwrap().clone()
    }

    pub fn stop(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the process is interrupted.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Nameserver {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(mut stream: TcpStream, shared: Arc<Shared>) {
    let _ = stream.set_nodelay(true);
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(WireError::Closed) => return,
            Err(e) => {
                debug!("nameserver connection dropped: {e}");
                return;
            }
        };
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        let reply = {
            let now = shared.clock.now_ms();
            let mut registry = shared.registry.lock().unwrap();
            respond(&mut registry, msg, now)
        };
        if let Some(reply) = reply {
            if write_message(&mut stream, &reply).is_err() {
                return;
            }
        }
    }
}

/// One-shot lookup against a nameserver.
pub fn query_brokers(
    nameserver: &str,
    sender_id: &str,
    role: Role,
    timeout: Duration,
) -> Result<Vec<BrokerEntry>, WireError> {
    let addr = crate::net::resolve(nameserver)?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    write_message(
        &mut stream,
        &Message::BrokerListRequest {
            sender_id: sender_id.into(),
            role,
        },
    )?;
    match read_message(&mut stream)? {
        Message::BrokerList { brokers } => Ok(brokers),
        other => Err(WireError::BadEncoding(format!(
            "expected broker_list, got {}",
            other.type_name()
        ))),
    }
}
