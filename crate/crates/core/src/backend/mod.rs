//! The trusted-side runtime.
//!
//! A backend hosts the actual model. It dials out to its proxy (the only
//! network operation it performs), authenticates, and then answers the call
//! stream one request at a time against a [`Model`] implementation.

mod adder;
mod plant;
mod reference;
mod store;

use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use log::{debug, info};
use serde::Serialize;
use thiserror::Error;

use crate::audit::SocketAudit;
use crate::descriptor::{parse_descriptor, ModelDescriptor, VariableType};
use crate::wire::{Connection, Handshake, Message, MessageKind, Status, Values, WireError, PROTOCOL_VERSION};

pub use adder::AdderModel;
pub use plant::{
    controller_update, generator_update, motor_update, ControllerModel, ControllerParams, GeneratorModel,
    GeneratorParams, MotorModel, DEFAULT_CONTROLLER, DEFAULT_GENERATOR, DEFAULT_MOTOR_TIME_CONSTANT,
};
pub use reference::{run_reference_simulation, run_reference_simulation_with, ReferenceParams, ReferenceRow};
pub use store::VariableStore;

/// Behavior of one simulation unit, as seen by the serve loop.
///
/// The callbacks mirror the FMI 2.0 co-simulation call set, so an adapter
/// around an existing FMU can implement this trait directly.
pub trait Model {
    fn setup_experiment(&mut self, _start_time: f64, _stop_time: Option<f64>, _tolerance: Option<f64>) -> Status {
        Status::Ok
    }
    fn enter_initialization_mode(&mut self) -> Status {
        Status::Ok
    }
    fn exit_initialization_mode(&mut self) -> Status {
        Status::Ok
    }
    fn set(&mut self, vrs: &[u32], values: &Values) -> Status;
    fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status>;
    fn do_step(&mut self, current_time: f64, step_size: f64) -> Status;
    fn terminate(&mut self) -> Status {
        Status::Ok
    }
    fn free_instance(&mut self) {}
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn setup_experiment(&mut self, start_time: f64, stop_time: Option<f64>, tolerance: Option<f64>) -> Status {
        (**self).setup_experiment(start_time, stop_time, tolerance)
    }
    fn enter_initialization_mode(&mut self) -> Status {
        (**self).enter_initialization_mode()
    }
    fn exit_initialization_mode(&mut self) -> Status {
        (**self).exit_initialization_mode()
    }
    fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
        (**self).set(vrs, values)
    }
    fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        (**self).get(var_type, vrs)
    }
    fn do_step(&mut self, current_time: f64, step_size: f64) -> Status {
        (**self).do_step(current_time, step_size)
    }
    fn terminate(&mut self) -> Status {
        (**self).terminate()
    }
    fn free_instance(&mut self) {
        (**self).free_instance()
    }
}

pub const BUILTIN_MODELS: [&str; 4] = ["adder", "controller", "motor", "generator"];

/// Descriptor shipped with a built-in model.
pub fn builtin_descriptor(name: &str) -> Option<ModelDescriptor> {
    let text = match name {
        "adder" => include_str!("../../fixtures/adder.json"),
        "controller" => include_str!("../../fixtures/controller.json"),
        "motor" => include_str!("../../fixtures/motor.json"),
        "generator" => include_str!("../../fixtures/generator.json"),
        _ => return None,
    };
    Some(parse_descriptor(text).expect("built-in descriptors are valid"))
}

pub fn builtin_model(name: &str) -> Option<Box<dyn Model + Send>> {
    let descriptor = builtin_descriptor(name)?;
    Some(match name {
        "adder" => Box::new(AdderModel::new(descriptor)),
        "controller" => Box::new(ControllerModel::new(descriptor)),
        "motor" => Box::new(MotorModel::new(descriptor)),
        "generator" => Box::new(GeneratorModel::new(descriptor)),
        _ => unreachable!("descriptor exists only for built-ins"),
    })
}

/// Runs a built-in model's backend on its own thread.
///
/// Panics if `model_name` is not one of [`BUILTIN_MODELS`].
pub fn spawn_builtin_backend(
    model_name: &str,
    config: BackendConfig,
) -> thread::JoinHandle<Result<ExitReport, BackendError>> {
    let mut model = builtin_model(model_name).unwrap_or_else(|| panic!("unknown built-in model {model_name}"));
    thread::Builder::new()
        .name(format!("backend-{}", config.instance_name))
        .spawn(move || connect_and_serve(&mut model, &config))
        .expect("spawn backend thread")
}

/// Outbound connection attempts before giving up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            interval: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub proxy_address: String,
    pub instance_name: String,
    pub auth_token: String,
    /// Slept before every frame the backend sends, handshake included.
    pub reply_delay: Duration,
    pub retry: RetryPolicy,
    pub handshake_timeout: Duration,
    pub audit: SocketAudit,
}

impl BackendConfig {
    pub fn new(proxy_address: impl Into<String>, instance_name: impl Into<String>, auth_token: impl Into<String>) -> Self {
        BackendConfig {
            proxy_address: proxy_address.into(),
            instance_name: instance_name.into(),
            auth_token: auth_token.into(),
            reply_delay: Duration::ZERO,
            retry: RetryPolicy::default(),
            handshake_timeout: crate::wire::DEFAULT_CALL_TIMEOUT,
            audit: SocketAudit::new(),
        }
    }

    pub fn with_reply_delay(mut self, delay: Duration) -> Self {
        self.reply_delay = delay;
        self
    }

    pub fn with_audit(mut self, audit: SocketAudit) -> Self {
        self.audit = audit;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// FREE_INSTANCE was served.
    Freed,
    /// The proxy closed the connection between frames.
    Closed,
}

/// Summary printed when a backend finishes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExitReport {
    pub instance_name: String,
    pub reason: ExitReason,
    /// Requests served, keyed by wire name (`SET_REAL`, `DO_STEP`, ...).
    pub served: BTreeMap<String, u64>,
}

impl ExitReport {
    pub fn count(&self, kind: MessageKind) -> u64 {
        self.served.get(kind.name()).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.served.values().sum()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("exit report serializes")
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("could not connect to {address} after {attempts} attempts: {source}")]
    ConnectFailed {
        address: String,
        attempts: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("authentication rejected by proxy (status {0})")]
    AuthenticationRejected(Status),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Dials the proxy, authenticates and serves calls until FREE_INSTANCE or
/// until the proxy closes the connection.
pub fn connect_and_serve<M: Model + ?Sized>(model: &mut M, config: &BackendConfig) -> Result<ExitReport, BackendError> {
    let stream = connect_with_retry(config)?;
    let mut conn = Connection::new(stream);
    info!(
        "backend {} connected to {}",
        config.instance_name, config.proxy_address
    );

    delay(config.reply_delay);
    let handshake = Message::Handshake(Handshake {
        version: PROTOCOL_VERSION,
        instance_name: config.instance_name.clone(),
        token: config.auth_token.clone(),
    });
    match conn.request_reply(&handshake, config.handshake_timeout) {
        Ok(Message::Reply { status: Status::Ok, .. }) => {}
        Ok(reply) => {
            conn.shutdown();
            return Err(BackendError::AuthenticationRejected(
                reply.status().unwrap_or(Status::Error),
            ));
        }
        // A proxy that rejects may close before its reply is read.
        Err(WireError::Closed) => return Err(BackendError::AuthenticationRejected(Status::Error)),
        Err(e) => return Err(e.into()),
    }

    let mut served: BTreeMap<String, u64> = BTreeMap::new();
    let reason = loop {
        let Some(request) = conn.receive(None)? else {
            break ExitReason::Closed;
        };
        let kind = request.kind();
        if request.is_reply() || kind == MessageKind::Handshake {
            conn.shutdown();
            return Err(BackendError::Protocol(format!(
                "unexpected frame 0x{:02X} in call stream",
                request.code()
            )));
        }
        debug!("backend {} serving {kind}", config.instance_name);
        *served.entry(kind.name().to_owned()).or_default() += 1;
        let reply = dispatch(model, request);
        delay(config.reply_delay);
        conn.send(&reply)?;
        if kind == MessageKind::FreeInstance {
            break ExitReason::Freed;
        }
    };
    conn.shutdown();
    Ok(ExitReport {
        instance_name: config.instance_name.clone(),
        reason,
        served,
    })
}

fn delay(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

fn connect_with_retry(config: &BackendConfig) -> Result<std::net::TcpStream, BackendError> {
    let attempts = config.retry.attempts.max(1);
    let mut last_err = None;
    for attempt in 1..=attempts {
        match config
            .audit
            .connect(&config.instance_name, &config.proxy_address, Duration::from_secs(5))
        {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                debug!(
                    "backend {}: connect attempt {attempt}/{attempts} failed: {e}",
                    config.instance_name
                );
                last_err = Some(e);
                if attempt < attempts {
                    thread::sleep(config.retry.interval);
                }
            }
        }
    }
    Err(BackendError::ConnectFailed {
        address: config.proxy_address.clone(),
        attempts,
        source: last_err.expect("at least one attempt"),
    })
}

/// Maps one request onto the model and builds the reply.
pub fn dispatch<M: Model + ?Sized>(model: &mut M, request: Message) -> Message {
    let kind = request.kind();
    let status = match request {
        Message::SetupExperiment {
            start_time,
            stop_time,
            tolerance,
        } => model.setup_experiment(start_time, stop_time, tolerance),
        Message::EnterInitializationMode => model.enter_initialization_mode(),
        Message::ExitInitializationMode => model.exit_initialization_mode(),
        Message::DoStep {
            current_time,
            step_size,
        } => model.do_step(current_time, step_size),
        Message::Set { vrs, values } => model.set(&vrs, &values),
        Message::Get { var_type, vrs } => {
            return match model.get(var_type, &vrs) {
                Ok(values) if values.var_type() == var_type => Message::GetReply {
                    status: Status::Ok,
                    values,
                },
                Ok(_) => Message::GetReply {
                    status: Status::Error,
                    values: Values::empty(var_type),
                },
                Err(status) => Message::GetReply {
                    status,
                    values: Values::empty(var_type),
                },
            };
        }
        Message::Terminate => model.terminate(),
        Message::FreeInstance => {
            model.free_instance();
            Status::Ok
        }
        Message::Handshake(_) | Message::Reply { .. } | Message::GetReply { .. } => Status::Error,
    };
    Message::Reply { request: kind, status }
}
