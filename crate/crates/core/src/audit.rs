//! Socket operation audit.
//!
//! Every socket the crate opens goes through a [`SocketAudit`]. Proxies only
//! get [`SocketAudit::bind`] and [`SocketAudit::accept`]; backends only get
//! [`SocketAudit::connect`]. The recorded log lets tests check which side of
//! a session dialed whom.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use std::{fmt, io};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Proxy,
    Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SocketOp {
    Bind,
    Listen,
    Accept,
    Connect,
}

impl fmt::Display for SocketOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SocketOp::Bind => "bind",
            SocketOp::Listen => "listen",
            SocketOp::Accept => "accept",
            SocketOp::Connect => "connect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocketEvent {
    pub role: Role,
    pub owner: String,
    pub op: SocketOp,
    pub addr: Option<SocketAddr>,
    pub ok: bool,
}

/// Shared, append-only log of socket operations.
#[derive(Debug, Clone, Default)]
pub struct SocketAudit {
    events: Arc<Mutex<Vec<SocketEvent>>>,
}

impl SocketAudit {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, role: Role, owner: &str, op: SocketOp, addr: Option<SocketAddr>, ok: bool) {
        self.events.lock().expect("audit lock").push(SocketEvent {
            role,
            owner: owner.to_owned(),
            op,
            addr,
            ok,
        });
    }

    pub fn events(&self) -> Vec<SocketEvent> {
        self.events.lock().expect("audit lock").clone()
    }

    /// Count of operations matching `role` and `op`, successful or not.
    pub fn count(&self, role: Role, op: SocketOp) -> usize {
        self.events
            .lock()
            .expect("audit lock")
            .iter()
            .filter(|e| e.role == role && e.op == op)
            .count()
    }

    pub fn count_for(&self, owner: &str, op: SocketOp) -> usize {
        self.events
            .lock()
            .expect("audit lock")
            .iter()
            .filter(|e| e.owner == owner && e.op == op)
            .count()
    }

    /// Binds and listens. `TcpListener::bind` does both in one call; both are logged.
    pub fn bind(&self, owner: &str, addr: &str) -> io::Result<TcpListener> {
        match TcpListener::bind(addr) {
            Ok(listener) => {
                let local = listener.local_addr().ok();
                self.record(Role::Proxy, owner, SocketOp::Bind, local, true);
                self.record(Role::Proxy, owner, SocketOp::Listen, local, true);
                Ok(listener)
            }
            Err(e) => {
                self.record(Role::Proxy, owner, SocketOp::Bind, None, false);
                Err(e)
            }
        }
    }

    /// Non-blocking accept on a listener already in non-blocking mode.
    pub fn accept(&self, owner: &str, listener: &TcpListener) -> io::Result<(TcpStream, SocketAddr)> {
        let result = listener.accept();
        if let Ok((_, peer)) = &result {
            self.record(Role::Proxy, owner, SocketOp::Accept, Some(*peer), true);
        }
        result
    }

    pub fn connect(&self, owner: &str, addr: &str, timeout: Duration) -> io::Result<TcpStream> {
        let target = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {addr}")))?;
        let result = TcpStream::connect_timeout(&target, timeout);
        self.record(Role::Backend, owner, SocketOp::Connect, Some(target), result.is_ok());
        result
    }
}
