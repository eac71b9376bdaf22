#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use cosim::backend::{builtin_descriptor, builtin_model, connect_and_serve, BackendConfig, BackendError, ExitReport, Model};
use cosim::descriptor::VariableType;
use cosim::proxy::{ProxyInstance, ProxyOptions};
use cosim::wire::{Status, Values};

/// Wraps a model and counts every callback that reaches it.
pub struct Counting<M> {
    pub inner: M,
    pub calls: Arc<AtomicUsize>,
}

impl<M: Model> Model for Counting<M> {
    fn setup_experiment(&mut self, start: f64, stop: Option<f64>, tol: Option<f64>) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.setup_experiment(start, stop, tol)
    }
    fn enter_initialization_mode(&mut self) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.enter_initialization_mode()
    }
    fn exit_initialization_mode(&mut self) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.exit_initialization_mode()
    }
    fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.set(vrs, values)
    }
    fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.get(var_type, vrs)
    }
    fn do_step(&mut self, t: f64, h: f64) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.do_step(t, h)
    }
    fn terminate(&mut self) -> Status {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.terminate()
    }
    fn free_instance(&mut self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.free_instance()
    }
}

pub type BackendHandle = JoinHandle<Result<ExitReport, BackendError>>;

/// Serves `model_name` with a callback counter attached.
pub fn spawn_counting(model_name: &str, config: BackendConfig) -> (BackendHandle, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let mut model = Counting {
        inner: builtin_model(model_name).expect("built-in"),
        calls: calls.clone(),
    };
    let handle = thread::spawn(move || connect_and_serve(&mut model, &config));
    (handle, calls)
}

pub fn quick_options() -> ProxyOptions {
    ProxyOptions {
        accept_timeout: Duration::from_secs(10),
        call_timeout: Duration::from_secs(10),
        ..ProxyOptions::default()
    }
}

pub fn bind_proxy(model_name: &str, token: &str, options: ProxyOptions) -> ProxyInstance {
    ProxyInstance::bind(
        model_name,
        builtin_descriptor(model_name).expect("built-in"),
        "127.0.0.1:0",
        token,
        options,
    )
    .expect("bind loopback")
}

pub fn backend_config(proxy: &ProxyInstance, name: &str, token: &str) -> BackendConfig {
    BackendConfig::new(proxy.local_addr().to_string(), name, token)
}

/// Parses `fixtures/wire_vectors.txt` into `(name, bytes)` pairs.
pub fn wire_vectors() -> Vec<(String, Vec<u8>)> {
    let text = include_str!("../../fixtures/wire_vectors.txt");
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let mut parts = l.split_whitespace();
            let name = parts.next().unwrap().to_owned();
            let hex: String = parts.collect();
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).expect("hex"))
                .collect();
            (name, bytes)
        })
        .collect()
}
