//! Client-side connection: a reader thread feeding a channel and a locked
//! writer, so heartbeats can be sent while the owner waits on replies.

use std::io;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::wire::{read_message, write_message, Message, WireError};

pub fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

/// Address other processes can dial for a socket bound to `local`.
pub fn advertised(local: SocketAddr) -> String {
    if local.ip().is_unspecified() {
        format!("127.0.0.1:{}", local.port())
    } else {
        local.to_string()
    }
}

/// Cloneable handle for sending on a connection.
#[derive(Clone)]
pub struct Sender {
    stream: Arc<Mutex<TcpStream>>,
}

impl Sender {
    pub fn send(&self, msg: &Message) -> Result<(), WireError> {
        let mut stream = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        write_message(&mut *stream, msg)
    }
}

pub struct Connection {
    sender: Sender,
    incoming: Receiver<Result<Message, WireError>>,
    peer: SocketAddr,
}

impl Connection {
    pub fn connect(addr: &str, timeout: Duration) -> io::Result<Connection> {
        let target = resolve(addr)?;
        let stream = TcpStream::connect_timeout(&target, timeout)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || loop {
            let next = read_message(&mut reader);
            let done = next.is_err();
            if tx.send(next).is_err() || done {
                break;
            }
        });
        Ok(Connection {
            sender: Sender {
                stream: Arc::new(Mutex::new(stream)),
            },
            incoming: rx,
            peer: target,
        })
    }

    pub fn sender(&self) -> Sender {
        self.sender.clone()
    }

    pub fn send(&self, msg: &Message) -> Result<(), WireError> {
        self.sender.send(msg)
    }

    /// Next message, `Ok(None)` on timeout. A dead reader is
    /// [`WireError::Closed`].
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, WireError> {
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(e)) => Err(e),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(WireError::Closed),
        }
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn close(&self) {
        let stream = self.sender.stream.lock().unwrap_or_else(|p| p.into_inner());
        let _ = stream.shutdown(Shutdown::Both);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}
