//! Length-prefixed JSON frames.
//!
//! Every frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
//! object with a string `type` field. Unknown fields are ignored so older
//! peers keep working when messages grow.

use std::io::{self, Read, Write};

use evonas_core::EvalConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Largest accepted payload, 16 MiB.
pub const MAX_PAYLOAD: usize = 16 << 20;
const HEADER: usize = 4;

pub const MESSAGE_TYPES: [&str; 15] = [
    "submit_task",
    "task_request",
    "task_assignment",
    "no_task",
    "task_result",
    "heartbeat",
    "heartbeat_ack",
    "reconnect",
    "register_broker",
    "broker_list_request",
    "broker_list",
    "link_request",
    "link_accept",
    "share_task",
    "reclaim_task",
];

/// Heartbeat and request timing shared by every daemon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolTimeouts {
    pub heartbeat_interval_ms: u64,
    pub heartbeat_misses_to_expire: u32,
    pub request_timeout_ms: u64,
}

impl Default for ProtocolTimeouts {
    fn default() -> Self {
        ProtocolTimeouts {
            heartbeat_interval_ms: 2000,
            heartbeat_misses_to_expire: 3,
            request_timeout_ms: 5000,
        }
    }
}

impl ProtocolTimeouts {
    pub fn with_interval(heartbeat_interval_ms: u64) -> Self {
        ProtocolTimeouts {
            heartbeat_interval_ms,
            ..Self::default()
        }
    }

    /// Silence after which a lease or registration is dropped.
    pub fn expiry_ms(&self) -> u64 {
        self.heartbeat_interval_ms * u64::from(self.heartbeat_misses_to_expire)
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.heartbeat_interval_ms == 0 {
            return Err("heartbeat interval must be positive");
        }
        if self.heartbeat_misses_to_expire == 0 {
            return Err("heartbeat misses must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Worker,
    Model,
    Broker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerEntry {
    pub broker_id: String,
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// Model to broker: evaluate this genotype.
    SubmitTask {
        task_id: String,
        sender_id: String,
        genotype: String,
        eval_config: EvalConfig,
        generation: u32,
    },
    /// Worker to broker. At most one outstanding per connection.
    TaskRequest { sender_id: String },
    TaskAssignment {
        task_id: String,
        lease_id: String,
        genotype: String,
        eval_config: EvalConfig,
        generation: u32,
        owned: bool,
    },
    NoTask,
    /// Worker to broker, and broker to model.
    TaskResult {
        task_id: String,
        sender_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lease_id: Option<String>,
        fitness: f64,
        loss: f64,
        eval_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    /// Liveness signal. Workers name their lease; brokers report idle workers
    /// to peers and client counts to the nameserver.
    Heartbeat {
        sender_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lease_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idle_workers: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clients: Option<u32>,
    },
    HeartbeatAck {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lease_id: Option<String>,
    },
    /// The receiver must re-register, or drop the lease it named.
    Reconnect { reason: String },
    RegisterBroker {
        sender_id: String,
        address: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clients: Option<u32>,
    },
    BrokerListRequest { sender_id: String, role: Role },
    BrokerList { brokers: Vec<BrokerEntry> },
    LinkRequest { sender_id: String, address: String },
    LinkAccept { sender_id: String },
    /// Owner broker to peer: run this task for me.
    ShareTask {
        task_id: String,
        sender_id: String,
        genotype: String,
        eval_config: EvalConfig,
        generation: u32,
    },
    /// Peer back to owner: result of a shared task.
    ReclaimTask {
        task_id: String,
        sender_id: String,
        fitness: f64,
        loss: f64,
        eval_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::SubmitTask { .. } => "submit_task",
            Message::TaskRequest { .. } => "task_request",
            Message::TaskAssignment { .. } => "task_assignment",
            Message::NoTask => "no_task",
            Message::TaskResult { .. } => "task_result",
            Message::Heartbeat { .. } => "heartbeat",
            Message::HeartbeatAck { .. } => "heartbeat_ack",
            Message::Reconnect { .. } => "reconnect",
            Message::RegisterBroker { .. } => "register_broker",
            Message::BrokerListRequest { .. } => "broker_list_request",
            Message::BrokerList { .. } => "broker_list",
            Message::LinkRequest { .. } => "link_request",
            Message::LinkAccept { .. } => "link_accept",
            Message::ShareTask { .. } => "share_task",
            Message::ReclaimTask { .. } => "reclaim_task",
        }
    }

    pub fn heartbeat(sender_id: impl Into<String>, lease_id: Option<String>) -> Self {
        Message::Heartbeat {
            sender_id: sender_id.into(),
            lease_id,
            idle_workers: None,
            clients: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversized(usize),
    #[error("bad encoding: {0}")]
    BadEncoding(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes `msg` into one frame.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = serde_json::to_vec(msg).map_err(|e| WireError::BadEncoding(e.to_string()))?;
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversized(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one complete frame. Trailing bytes are an error.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, WireError> {
    let len = frame_len(bytes)?;
    let total = HEADER + len;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(WireError::BadEncoding(format!(
            "{} bytes after frame end",
            bytes.len() - total
        )));
    }
    decode_payload(&bytes[HEADER..])
}

fn frame_len(bytes: &[u8]) -> Result<usize, WireError> {
    if bytes.len() < HEADER {
        return Err(WireError::Truncated {
            needed: HEADER,
            have: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(WireError::BadEncoding("empty payload".into()));
    }
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversized(len));
    }
    Ok(len)
}

/// Decodes a frame payload (the JSON object without its length prefix).
pub fn decode_payload(payload: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(payload).map_err(|e| WireError::BadEncoding(e.to_string()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| WireError::BadEncoding(e.to_string()))?;
    let Value::Object(map) = &value else {
        return Err(WireError::BadEncoding("payload is not a JSON object".into()));
    };
    let kind = match map.get("type") {
        None => return Err(WireError::MissingField("type".into())),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(WireError::BadEncoding("`type` is not a string".into())),
    };
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(WireError::UnknownType(kind));
    }
    serde_json::from_value(value).map_err(|e| {
        let text = e.to_string();
        match text.strip_prefix("missing field `") {
            Some(rest) => WireError::MissingField(rest.split('`').next().unwrap_or("").into()),
            None => WireError::BadEncoding(text),
        }
    })
}

/// Incremental decoder for a byte stream split at arbitrary points.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if self.buf.len() < HEADER {
            return Ok(None);
        }
        let len = frame_len(&self.buf)?;
        if self.buf.len() < HEADER + len {
            return Ok(None);
        }
        let frame: Vec<u8> = self.buf.drain(..HEADER + len).collect();
        decode_payload(&frame[HEADER..]).map(Some)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Blocking read of one message. A clean end of stream before any header byte
/// is [`WireError::Closed`].
pub fn read_message(reader: &mut impl Read) -> Result<Message, WireError> {
    let mut header = [0u8; HEADER];
    let mut filled = 0;
    while filled < HEADER {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER,
                    have: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = frame_len(&header)?;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: HEADER + len,
            have: HEADER,
        },
        _ => WireError::Io(e),
    })?;
    decode_payload(&payload)
}

pub fn write_message(writer: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    let frame = encode_frame(msg)?;
    writer.write_all(&frame)?;
    writer.flush()?;
    Ok(())
}
