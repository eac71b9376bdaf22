//! The untrusted-side stand-in for a simulation unit.
//!
//! A [`ProxyInstance`] holds no model. It binds a listening socket, waits for
//! the model backend to dial in and authenticate, and from then on forwards
//! each call over the wire while enforcing the lifecycle state machine. It
//! never opens an outbound connection.

use std::fmt;
use std::net::{SocketAddr, TcpListener};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use thiserror::Error;

use crate::audit::SocketAudit;
use crate::descriptor::{Causality, ModelDescriptor, VariableType};
use crate::wire::{
    Connection, Handshake, Message, MessageKind, Status, Values, WireError, DEFAULT_CALL_TIMEOUT,
    PROTOCOL_VERSION,
};

pub const DEFAULT_ACCEPT_TIMEOUT: Duration = Duration::from_secs(60);

const ACCEPT_POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceState {
    Listening,
    Instantiated,
    InitializationMode,
    StepMode,
    Terminated,
    Errored,
}

impl InstanceState {
    pub const ALL: [InstanceState; 6] = [
        InstanceState::Listening,
        InstanceState::Instantiated,
        InstanceState::InitializationMode,
        InstanceState::StepMode,
        InstanceState::Terminated,
        InstanceState::Errored,
    ];
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Whether `kind` may be forwarded while in `state`.
///
/// FREE_INSTANCE and HANDSHAKE are never forwarded: the handshake belongs to
/// instantiation and freeing goes through [`ProxyInstance::free`].
pub fn is_legal(state: InstanceState, kind: MessageKind) -> bool {
    use InstanceState::*;
    use MessageKind as K;
    match kind {
        K::SetupExperiment => state == Instantiated,
        K::EnterInitializationMode => state == Instantiated,
        K::ExitInitializationMode => state == InitializationMode,
        K::DoStep => state == StepMode,
        K::Terminate => state == StepMode,
        k if k.is_set() => matches!(state, Instantiated | InitializationMode | StepMode),
        k if k.is_get() => matches!(state, InitializationMode | StepMode),
        _ => false,
    }
}

#[derive(Debug, Clone)]
pub struct ProxyOptions {
    pub accept_timeout: Duration,
    pub call_timeout: Duration,
    pub audit: SocketAudit,
    /// Record frame codes on the backend connection.
    pub trace: bool,
}

impl Default for ProxyOptions {
    fn default() -> Self {
        ProxyOptions {
            accept_timeout: DEFAULT_ACCEPT_TIMEOUT,
            call_timeout: DEFAULT_CALL_TIMEOUT,
            audit: SocketAudit::new(),
            trace: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("unit {unit}: cannot bind {addr}: {source}")]
    Bind {
        unit: String,
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unit {unit}: no authenticated backend within {timeout:?}")]
    AcceptTimeout { unit: String, timeout: Duration },
    #[error("unit {unit}: accept from state {state}")]
    NotListening { unit: String, state: InstanceState },
    #[error("unit {unit}: {source}")]
    Io {
        unit: String,
        #[source]
        source: std::io::Error,
    },
}

/// Result of one forwarded call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallResult {
    pub status: Status,
    /// Present for GET calls answered by the backend.
    pub values: Option<Values>,
}

impl CallResult {
    fn local_error() -> Self {
        CallResult {
            status: Status::Error,
            values: None,
        }
    }
}

/// Compares the presented token against the expected one in time that
/// depends only on the presented length.
pub fn tokens_match(expected: &str, presented: &str) -> bool {
    let expected = expected.as_bytes();
    let presented = presented.as_bytes();
    let mut diff = u8::from(expected.len() != presented.len());
    for (i, p) in presented.iter().enumerate() {
        let e = expected.get(i).copied().unwrap_or(!*p);
        diff |= e ^ p;
    }
    diff == 0
}

fn unix_ts() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or_default()
}

#[derive(Debug)]
pub struct ProxyInstance {
    unit_name: String,
    descriptor: ModelDescriptor,
    expected_token: String,
    state: InstanceState,
    listener: Option<TcpListener>,
    local_addr: SocketAddr,
    connection: Option<Connection>,
    options: ProxyOptions,
    rejected_handshakes: usize,
    closed_bytes: u64,
    freed: bool,
    last_error: Option<String>,
}

impl ProxyInstance {
    /// Binds the listening endpoint. The instance starts in `Listening`.
    pub fn bind(
        unit_name: &str,
        descriptor: ModelDescriptor,
        listen_address: &str,
        expected_token: &str,
        options: ProxyOptions,
    ) -> Result<Self, ProxyError> {
        let listener = options
            .audit
            .bind(unit_name, listen_address)
            .map_err(|source| ProxyError::Bind {
                unit: unit_name.to_owned(),
                addr: listen_address.to_owned(),
                source,
            })?;
        let io_err = |source| ProxyError::Io {
            unit: unit_name.to_owned(),
            source,
        };
        let local_addr = listener.local_addr().map_err(io_err)?;
        listener.set_nonblocking(true).map_err(io_err)?;
        info!("EVENT=listen unit={unit_name} addr={local_addr} ts={:.6}", unix_ts());
        Ok(ProxyInstance {
            unit_name: unit_name.to_owned(),
            descriptor,
            expected_token: expected_token.to_owned(),
            state: InstanceState::Listening,
            listener: Some(listener),
            local_addr,
            connection: None,
            options,
            rejected_handshakes: 0,
            closed_bytes: 0,
            freed: false,
            last_error: None,
        })
    }

    /// Binds, then blocks until a backend authenticates or the accept timeout elapses.
    pub fn instantiate(
        unit_name: &str,
        descriptor: ModelDescriptor,
        listen_address: &str,
        expected_token: &str,
        options: ProxyOptions,
    ) -> Result<Self, ProxyError> {
        let mut proxy = Self::bind(unit_name, descriptor, listen_address, expected_token, options)?;
        proxy.accept_backend()?;
        Ok(proxy)
    }

    /// Blocks until a backend completes the handshake with the expected
    /// token and protocol version. Rejected clients get an Error reply and
    /// are disconnected; listening resumes within the same timeout window.
    pub fn accept_backend(&mut self) -> Result<(), ProxyError> {
        if self.state != InstanceState::Listening || self.freed {
            return Err(ProxyError::NotListening {
                unit: self.unit_name.clone(),
                state: self.state,
            });
        }
        let timeout = self.options.accept_timeout;
        let deadline = Instant::now() + timeout;
        let listener = self.listener.as_ref().expect("listening proxies own a listener");
        loop {
            let now = Instant::now();
            if now >= deadline {
                warn!(
                    "EVENT=error unit={} reason=accept_timeout ts={:.6}",
                    self.unit_name,
                    unix_ts()
                );
                return Err(ProxyError::AcceptTimeout {
                    unit: self.unit_name.clone(),
                    timeout,
                });
            }
            let (stream, peer) = match self.options.audit.accept(&self.unit_name, listener) {
                Ok(accepted) => accepted,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(ACCEPT_POLL.min(deadline - now));
                    continue;
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(source) => {
                    return Err(ProxyError::Io {
                        unit: self.unit_name.clone(),
                        source,
                    })
                }
            };
            if let Err(source) = stream.set_nonblocking(false) {
                warn!("EVENT=error unit={} peer={peer} reason={source}", self.unit_name);
                continue;
            }
            let mut conn = Connection::new(stream);
            if self.options.trace {
                conn.enable_trace();
            }
            let budget = deadline
                .saturating_duration_since(Instant::now())
                .min(self.options.call_timeout)
                .max(Duration::from_millis(1));
            match self.check_handshake(&mut conn, budget) {
                Ok(name) => {
                    conn.send(&Message::Reply {
                        request: MessageKind::Handshake,
                        status: Status::Ok,
                    })
                    .map_err(|e| ProxyError::Io {
                        unit: self.unit_name.clone(),
                        source: std::io::Error::other(e.to_string()),
                    })?;
                    info!(
                        "EVENT=handshake_ok unit={} peer={peer} instance={name} ts={:.6}",
                        self.unit_name,
                        unix_ts()
                    );
                    self.connection = Some(conn);
                    self.transition(InstanceState::Instantiated);
                    return Ok(());
                }
                Err(reason) => {
                    self.rejected_handshakes += 1;
                    warn!(
                        "EVENT=handshake_reject unit={} peer={peer} reason={reason} ts={:.6}",
                        self.unit_name,
                        unix_ts()
                    );
                    let _ = conn.send(&Message::Reply {
                        request: MessageKind::Handshake,
                        status: Status::Error,
                    });
                    conn.shutdown();
                }
            }
        }
    }

    fn check_handshake(&self, conn: &mut Connection, budget: Duration) -> Result<String, String> {
        let message = conn
            .receive(Some(budget))
            .map_err(|e| e.to_string())?
            .ok_or_else(|| "closed before handshake".to_owned())?;
        let Message::Handshake(Handshake {
            version,
            instance_name,
            token,
        }) = message
        else {
            return Err(format!("expected HANDSHAKE, got 0x{:02X}", message.code()));
        };
        // Evaluate both checks so rejection timing does not reveal which failed.
        let token_ok = tokens_match(&self.expected_token, &token);
        let version_ok = version == PROTOCOL_VERSION;
        match (version_ok, token_ok) {
            (true, true) => Ok(instance_name),
            (false, _) => Err(format!("unsupported protocol version {version}")),
            (true, false) => Err("token mismatch".to_owned()),
        }
    }

    fn transition(&mut self, next: InstanceState) {
        if next != self.state {
            info!(
                "EVENT=state_change unit={} from={} to={next} ts={:.6}",
                self.unit_name,
                self.state,
                unix_ts()
            );
            self.state = next;
        }
    }

    fn fail(&mut self, reason: String) {
        warn!("EVENT=error unit={} reason={reason} ts={:.6}", self.unit_name, unix_ts());
        self.last_error = Some(reason);
        if let Some(conn) = self.connection.take() {
            self.closed_bytes += conn.bytes_written();
            conn.shutdown();
        }
        self.transition(InstanceState::Errored);
    }

    fn reject_locally(&mut self, reason: String) -> CallResult {
        warn!(
            "EVENT=error unit={} reason=local_reject detail={reason:?} ts={:.6}",
            self.unit_name,
            unix_ts()
        );
        self.last_error = Some(reason);
        CallResult::local_error()
    }

    /// Checks value references against the descriptor before anything is sent.
    fn check_refs(&self, kind: MessageKind, vrs: &[u32]) -> Result<(), String> {
        let var_type = kind.data_type().expect("data kinds carry a type");
        for vr in vrs {
            let var = self
                .descriptor
                .variable_by_ref(var_type, *vr)
                .ok_or_else(|| format!("{kind}: no {var_type} variable with value reference {vr}"))?;
            if kind.is_set() {
                let settable = match self.state {
                    InstanceState::StepMode => var.causality == Causality::Input,
                    _ => var.causality != Causality::Output,
                };
                if !settable {
                    return Err(format!(
                        "{kind}: {} ({}) cannot be set in {}",
                        var.name, var.causality, self.state
                    ));
                }
            }
        }
        Ok(())
    }

    /// Forwards one call to the backend and advances the state machine.
    ///
    /// Calls that are illegal in the current state are answered locally with
    /// `Status::Error` and put no bytes on the wire. Transport failures put
    /// the instance in `Errored` and return `Status::Fatal`.
    pub fn forward_call(&mut self, request: Message) -> CallResult {
        let kind = request.kind();
        if request.is_reply() {
            return self.reject_locally(format!("{kind} reply cannot be forwarded as a request"));
        }
        if self.freed || !is_legal(self.state, kind) {
            return self.reject_locally(format!("{kind} not allowed in state {}", self.state));
        }
        match &request {
            Message::Set { vrs, values } => {
                if vrs.len() != values.len() {
                    return self.reject_locally(format!(
                        "{kind}: {} value references but {} values",
                        vrs.len(),
                        values.len()
                    ));
                }
                if let Err(reason) = self.check_refs(kind, vrs) {
                    return self.reject_locally(reason);
                }
            }
            Message::Get { vrs, .. } => {
                if let Err(reason) = self.check_refs(kind, vrs) {
                    return self.reject_locally(reason);
                }
            }
            _ => {}
        }
        let timeout = self.options.call_timeout;
        let Some(conn) = self.connection.as_mut() else {
            return self.reject_locally(format!("{kind}: no live connection"));
        };
        match conn.request_reply(&request, timeout) {
            Ok(reply) => {
                let status = reply.status().expect("replies carry a status");
                let values = match reply {
                    Message::GetReply { values, .. } => Some(values),
                    _ => None,
                };
                if let (Message::Get { vrs, .. }, Some(v)) = (&request, &values) {
                    if status.is_success() && v.len() != vrs.len() {
                        self.fail(format!("{kind}: asked for {} values, got {}", vrs.len(), v.len()));
                        return CallResult {
                            status: Status::Fatal,
                            values: None,
                        };
                    }
                }
                if status == Status::Fatal {
                    self.fail(format!("backend answered {kind} with Fatal"));
                } else if status.is_success() {
                    match kind {
                        MessageKind::EnterInitializationMode => {
                            self.transition(InstanceState::InitializationMode)
                        }
                        MessageKind::ExitInitializationMode => self.transition(InstanceState::StepMode),
                        MessageKind::Terminate => self.transition(InstanceState::Terminated),
                        _ => {}
                    }
                }
                CallResult { status, values }
            }
            Err(e) => {
                let reason = match &e {
                    WireError::Timeout(t) => format!("{kind}: backend silent for {t:?}"),
                    other => format!("{kind}: {other}"),
                };
                self.fail(reason);
                CallResult {
                    status: Status::Fatal,
                    values: None,
                }
            }
        }
    }

    pub fn setup_experiment(&mut self, start_time: f64, stop_time: Option<f64>, tolerance: Option<f64>) -> Status {
        self.forward_call(Message::SetupExperiment {
            start_time,
            stop_time,
            tolerance,
        })
        .status
    }

    pub fn enter_initialization_mode(&mut self) -> Status {
        self.forward_call(Message::EnterInitializationMode).status
    }

    pub fn exit_initialization_mode(&mut self) -> Status {
        self.forward_call(Message::ExitInitializationMode).status
    }

    pub fn do_step(&mut self, current_time: f64, step_size: f64) -> Status {
        self.forward_call(Message::DoStep {
            current_time,
            step_size,
        })
        .status
    }

    pub fn set(&mut self, vrs: Vec<u32>, values: Values) -> Status {
        self.forward_call(Message::set(vrs, values)).status
    }

    pub fn set_real(&mut self, vrs: &[u32], values: &[f64]) -> Status {
        self.set(vrs.to_vec(), Values::Real(values.to_vec()))
    }

    pub fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        let result = self.forward_call(Message::get(var_type, vrs.to_vec()));
        match (result.status.is_success(), result.values) {
            (true, Some(values)) => Ok(values),
            (true, None) => Err(Status::Error),
            (false, _) => Err(result.status),
        }
    }

    pub fn get_real(&mut self, vrs: &[u32]) -> Result<Vec<f64>, Status> {
        match self.get(VariableType::Real, vrs)? {
            Values::Real(v) => Ok(v),
            _ => Err(Status::Error),
        }
    }

    pub fn terminate(&mut self) -> Status {
        self.forward_call(Message::Terminate).status
    }

    /// Releases the instance. Sends FREE_INSTANCE when a connection is live
    /// (its reply is awaited but not required), then closes every socket.
    /// Calling it again does nothing.
    pub fn free(&mut self) {
        if self.freed {
            return;
        }
        self.freed = true;
        if let Some(mut conn) = self.connection.take() {
            let timeout = self.options.call_timeout.min(Duration::from_secs(5));
            if let Err(e) = conn.request_reply(&Message::FreeInstance, timeout) {
                warn!("EVENT=error unit={} reason=free_instance detail={e}", self.unit_name);
            }
            self.closed_bytes += conn.bytes_written();
            conn.shutdown();
        }
        self.listener = None;
        info!("EVENT=freed unit={} state={} ts={:.6}", self.unit_name, self.state, unix_ts());
    }

    pub fn state(&self) -> InstanceState {
        self.state
    }

    pub fn unit_name(&self) -> &str {
        &self.unit_name
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn is_connected(&self) -> bool {
        self.connection.is_some()
    }

    pub fn is_listening(&self) -> bool {
        self.listener.is_some()
    }

    pub fn is_freed(&self) -> bool {
        self.freed
    }

    pub fn rejected_handshakes(&self) -> usize {
        self.rejected_handshakes
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    /// Total bytes this proxy has written to backend connections, handshake
    /// replies to accepted backends included.
    pub fn wire_bytes_written(&self) -> u64 {
        self.closed_bytes + self.connection.as_ref().map_or(0, Connection::bytes_written)
    }

    /// Frame trace of the live connection, when tracing was requested.
    pub fn trace(&self) -> &[crate::wire::TraceEvent] {
        self.connection.as_ref().map_or(&[], |c| c.trace())
    }
}

impl Drop for ProxyInstance {
    fn drop(&mut self) {
        self.free();
    }
}
