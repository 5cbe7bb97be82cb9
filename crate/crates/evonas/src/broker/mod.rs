//! Task broker daemon.
//!
//! One owner thread holds the [`BrokerCore`] and applies events in arrival
//! order. Every connection gets a reader thread that forwards frames to the
//! owner and a writer thread fed by a channel, so a slow peer never blocks
//! the owner.

mod core;

pub use self::core::{
    BrokerConfig, BrokerCore, BrokerError, BrokerEvent, BrokerStats, ConnId, EventKind, Outbox,
    TaskOutcome,
};

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

use crate::clock::Clock;
use crate::net::{advertised, resolve};
use crate::wire::{read_message, write_message, Message, ProtocolTimeouts, Role, WireError};

#[derive(Debug, Clone)]
pub struct BrokerOptions {
    pub listen: String,
    /// Generated when absent.
    pub broker_id: Option<String>,
    /// Address handed to the nameserver and to peers. Defaults to the bound
    /// address, with an unspecified IP replaced by loopback.
    pub advertise: Option<String>,
    pub nameserver: Option<String>,
    pub timeouts: ProtocolTimeouts,
    pub park_ms: Option<u64>,
    pub share_factor: usize,
    /// Peers to link with at startup.
    pub links: Vec<String>,
    /// Link with brokers found through the nameserver.
    pub auto_link: bool,
}

impl Default for BrokerOptions {
    fn default() -> Self {
        BrokerOptions {
            listen: "127.0.0.1:0".into(),
            broker_id: None,
            advertise: None,
            nameserver: None,
            timeouts: ProtocolTimeouts::default(),
            park_ms: None,
            share_factor: 2,
            links: Vec::new(),
            auto_link: true,
        }
    }
}

enum Event {
    Opened {
        conn: ConnId,
        writer: Sender<Message>,
        dialed: bool,
    },
    Frame {
        conn: ConnId,
        msg: Message,
    },
    Closed {
        conn: ConnId,
    },
    Snapshot(Sender<Snapshot>),
    Stop,
}

/// Owner-thread view handed to callers.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub stats: BrokerStats,
    pub events: Vec<BrokerEvent>,
    pub peers: BTreeSet<String>,
    pub leased: Vec<(String, String)>,
}

struct Shared {
    stop: AtomicBool,
    next_conn: AtomicU64,
    clients: AtomicU32,
    peers: Mutex<BTreeSet<String>>,
}

/// Running broker. Dropping the handle stops it.
pub struct Broker {
    id: String,
    addr: SocketAddr,
    advertise: String,
    tx: Sender<Event>,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Broker {
    pub fn start(opts: BrokerOptions, clock: Arc<dyn Clock>) -> io::Result<Broker> {
        opts.timeouts
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let listener = TcpListener::bind(&opts.listen)?;
        let addr = listener.local_addr()?;
        let advertise = opts.advertise.clone().unwrap_or_else(|| advertised(addr));
        let id = opts
            .broker_id
            .clone()
            .unwrap_or_else(|| format!("broker-{}", uuid::Uuid::new_v4()));
        let mut cfg = BrokerConfig::new(id.clone(), opts.timeouts);
        cfg.share_factor = opts.share_factor;
        if let Some(p) = opts.park_ms {
            cfg.park_ms = p;
        }
        let shared = Arc::new(Shared {
            stop: AtomicBool::new(false),
            next_conn: AtomicU64::new(1),
            clients: AtomicU32::new(0),
            peers: Mutex::new(BTreeSet::new()),
        });
        let (tx, rx) = mpsc::channel();
        info!("broker {id} listening on {addr}");

        let mut threads = Vec::new();
        {
            let shared = shared.clone();
            let clock = clock.clone();
            let advertise = advertise.clone();
            threads.push(thread::spawn(move || owner_loop(cfg, rx, clock, shared, advertise)));
        }
        {
            let shared = shared.clone();
            let tx = tx.clone();
            threads.push(thread::spawn(move || {
                for stream in listener.incoming() {
                    if shared.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match stream {
                        Ok(stream) => attach(stream, false, &shared, &tx),
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            }));
        }
        for peer in &opts.links {
            if let Err(e) = dial(peer, &shared, &tx) {
                warn!("cannot link with {peer}: {e}");
            }
        }
        if let Some(ns) = opts.nameserver.clone() {
            let shared = shared.clone();
            let tx = tx.clone();
            let id = id.clone();
            let advertise = advertise.clone();
            let timeouts = opts.timeouts;
            let auto_link = opts.auto_link;
            threads.push(thread::spawn(move || {
                nameserver_loop(&ns, &id, &advertise, timeouts, auto_link, &shared, &tx)
            }));
        }
        Ok(Broker {
            id,
            addr,
            advertise,
            tx,
            shared,
            threads,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Dialable address as given to the nameserver.
    pub fn address(&self) -> &str {
        &self.advertise
    }

    pub fn snapshot(&self) -> Option<Snapshot> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Event::Snapshot(tx)).ok()?;
        rx.recv_timeout(Duration::from_secs(5)).ok()
    }

    pub fn stats(&self) -> BrokerStats {
        self.snapshot().map(|s| s.stats).unwrap_or_default()
    }

    /// Links with the broker at `peer`.
    pub fn link(&self, peer: &str) -> io::Result<()> {
        dial(peer, &self.shared, &self.tx)
    }

    pub fn stop(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.tx.send(Event::Stop);
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the broker stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.stop();
    }
}

fn dial(peer: &str, shared: &Arc<Shared>, tx: &Sender<Event>) -> io::Result<()> {
    let stream = TcpStream::connect_timeout(&resolve(peer)?, Duration::from_secs(5))?;
    attach(stream, true, shared, tx);
    Ok(())
}

/// Registers a socket with the owner and starts its reader and writer.
fn attach(stream: TcpStream, dialed: bool, shared: &Arc<Shared>, tx: &Sender<Event>) {
    let conn = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    let _ = stream.set_nodelay(true);
    let Ok(mut reader) = stream.try_clone() else {
        return;
    };
    let (wtx, wrx) = mpsc::channel::<Message>();
    if tx
        .send(Event::Opened {
            conn,
            writer: wtx,
            dialed,
        })
        .is_err()
    {
        return;
    }
    let mut writer = stream;
    thread::spawn(move || {
        for msg in wrx {
            if let Err(e) = write_message(&mut writer, &msg) {
                debug!("write to {conn} failed: {e}");
                break;
            }
        }
        let _ = writer.shutdown(Shutdown::Both);
    });
    let tx = tx.clone();
    thread::spawn(move || {
        loop {
            match read_message(&mut reader) {
                Ok(msg) => {
                    if tx.send(Event::Frame { conn, msg }).is_err() {
                        return;
                    }
                }
                Err(WireError::Closed) => break,
                Err(e) => {
                    debug!("connection {conn} dropped: {e}");
                    break;
                }
            }
        }
        let _ = tx.send(Event::Closed { conn });
    });
}

fn owner_loop(
    cfg: BrokerConfig,
    rx: Receiver<Event>,
    clock: Arc<dyn Clock>,
    shared: Arc<Shared>,
    advertise: String,
) {
    let tick = Duration::from_millis((cfg.timeouts.heartbeat_interval_ms / 8).clamp(5, 50));
    let mut core = BrokerCore::new(cfg);
    let mut writers: HashMap<ConnId, Sender<Message>> = HashMap::new();
    let mut last_tick = clock.now_ms();
    let route = |out: Outbox, writers: &mut HashMap<ConnId, Sender<Message>>| {
        for (conn, msg) in out {
            if let Some(w) = writers.get(&conn) {
                let _ = w.send(msg);
            }
        }
    };
    loop {
        let event = rx.recv_timeout(tick);
        let now = clock.now_ms();
        match event {
            Ok(Event::Opened {
                conn,
                writer,
                dialed,
            }) => {
                writers.insert(conn, writer);
                if dialed {
                    let out = core.dialed(conn, advertise.clone());
                    route(out, &mut writers);
                }
            }
            Ok(Event::Frame { conn, msg }) => {
                let out = core.handle(conn, msg, now);
                route(out, &mut writers);
            }
            Ok(Event::Closed { conn }) => {
                writers.remove(&conn);
                let out = core.closed(conn, now);
                route(out, &mut writers);
            }
            Ok(Event::Snapshot(reply)) => {
                let _ = reply.send(Snapshot {
                    stats: core.stats(),
                    events: core.events().to_vec(),
                    peers: core.peer_ids(),
                    leased: core.leased_tasks(),
                });
            }
            Ok(Event::Stop) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        if now.saturating_sub(last_tick) >= tick.as_millis() as u64 {
            last_tick = now;
            let out = core.tick(now);
            route(out, &mut writers);
        }
        shared
            .clients
            .store(core.client_count() as u32, Ordering::SeqCst);
        *shared.peers.lock().unwrap() = core.peer_ids();
    }
    // dropping the writers closes every connection
    writers.clear();
}

fn nameserver_loop(
    nameserver: &str,
    id: &str,
    advertise: &str,
    timeouts: ProtocolTimeouts,
    auto_link: bool,
    shared: &Arc<Shared>,
    tx: &Sender<Event>,
) {
    let interval = Duration::from_millis(timeouts.heartbeat_interval_ms);
    let io_timeout = Duration::from_millis(timeouts.request_timeout_ms);
    let mut stream: Option<TcpStream> = None;
    let mut registered = false;
    let mut beats: u64 = 0;
    while !shared.stop.load(Ordering::SeqCst) {
        if stream.is_none() {
            stream = resolve(nameserver)
                .and_then(|a| TcpStream::connect_timeout(&a, io_timeout))
                .and_then(|s| {
                    s.set_read_timeout(Some(io_timeout))?;
                    Ok(s)
                })
                .map_err(|e| warn!("nameserver {nameserver} unreachable: {e}"))
                .ok();
            registered = false;
        }
        if let Some(s) = stream.as_mut() {
            let clients = Some(shared.clients.load(Ordering::SeqCst));
            let msg = if registered {
                Message::Heartbeat {
                    sender_id: id.into(),
                    lease_id: None,
                    idle_workers: None,
                    clients,
                }
            } else {
                Message::RegisterBroker {
                    sender_id: id.into(),
                    address: advertise.into(),
                    clients,
                }
            };
            match write_message(s, &msg).and_then(|_| read_message(s)) {
                Ok(Message::HeartbeatAck { .. }) => {
                    if !registered {
                        info!("broker {id} registered with {nameserver}");
                    }
                    registered = true;
                }
                Ok(Message::Reconnect { reason }) => {
                    info!("nameserver asks {id} to re-register: {reason}");
                    registered = false;
                }
                Ok(other) => debug!("unexpected {} from nameserver", other.type_name()),
                Err(e) => {
                    warn!("nameserver link failed: {e}");
                    stream = None;
                }
            }
            if registered && auto_link && beats.is_multiple_of(5) {
                if let Some(s) = stream.as_mut() {
                    link_new_peers(s, id, shared, tx);
                }
            }
        }
        beats += 1;
        sleep_unless_stopped(shared, if registered { interval } else { interval.min(Duration::from_millis(200)) });
    }
}

/// Dials brokers listed by the nameserver that are not yet linked. Only the
/// broker with the smaller id dials, so a pair links once.
fn link_new_peers(stream: &mut TcpStream, id: &str, shared: &Arc<Shared>, tx: &Sender<Event>) {
    let request = Message::BrokerListRequest {
        sender_id: id.into(),
        role: Role::Broker,
    };
    let Ok(Message::BrokerList { brokers }) =
        write_message(stream, &request).and_then(|_| read_message(stream))
    else {
        return;
    };
    let linked = shared.peers.lock().unwrap().clone();
    for entry in brokers {
        if entry.broker_id.as_str() > id && !linked.contains(&entry.broker_id) {
            if let Err(e) = dial(&entry.address, shared, tx) {
                debug!("cannot link with {}: {e}", entry.broker_id);
            }
        }
    }
}

fn sleep_unless_stopped(shared: &Shared, total: Duration) {
    let step = Duration::from_millis(20);
    let mut left = total;
    while !left.is_zero() && !shared.stop.load(Ordering::SeqCst) {
        let d = left.min(step);
        thread::sleep(d);
        left -= d;
    }
}
