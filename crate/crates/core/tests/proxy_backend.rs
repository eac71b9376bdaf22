mod support;

use std::net::TcpListener;
use std::sync::atomic::Ordering;
use std::thread;
use std::time::{Duration, Instant};

use cosim::audit::{Role, SocketAudit, SocketOp};
use cosim::backend::{
    builtin_model, connect_and_serve, BackendConfig, BackendError, ExitReason, Model, RetryPolicy,
};
use cosim::descriptor::VariableType;
use cosim::proxy::{InstanceState, ProxyError, ProxyOptions};
use cosim::wire::{Connection, Handshake, Message, MessageKind, Status, TraceEvent, Values};

use support::{backend_config, bind_proxy, quick_options, spawn_counting};

fn init_adder(proxy: &mut cosim::proxy::ProxyInstance) {
    assert_eq!(proxy.setup_experiment(0.0, Some(1.0), None), Status::Ok);
    assert_eq!(proxy.enter_initialization_mode(), Status::Ok);
    assert_eq!(proxy.exit_initialization_mode(), Status::Ok);
    assert_eq!(proxy.state(), InstanceState::StepMode);
}

#[test]
fn wrong_token_is_rejected_then_right_token_accepted() {
    let mut proxy = bind_proxy("adder", "good-token", quick_options());
    let bad = backend_config(&proxy, "intruder", "bad-token");
    let good = backend_config(&proxy, "adder", "good-token");
    let (bad_done_tx, bad_done_rx) = std::sync::mpsc::channel();
    let clients = thread::spawn(move || {
        let (h, calls) = spawn_counting("adder", bad);
        let result = h.join().unwrap();
        bad_done_tx.send((result, calls.load(Ordering::SeqCst))).unwrap();
        let (h, calls) = spawn_counting("adder", good);
        (h.join().unwrap(), calls)
    });
    proxy.accept_backend().expect("right token accepted");
    let (bad_result, bad_calls) = bad_done_rx.recv().unwrap();
    assert!(
        matches!(bad_result, Err(BackendError::AuthenticationRejected(Status::Error))),
        "{bad_result:?}"
    );
    assert_eq!(bad_calls, 0, "rejected backend must not see any callback");
    assert_eq!(proxy.rejected_handshakes(), 1);
    assert_eq!(proxy.state(), InstanceState::Instantiated);

    init_adder(&mut proxy);
    assert_eq!(proxy.set_real(&[0, 1], &[1.0, 2.0]), Status::Ok);
    assert_eq!(proxy.do_step(0.0, 0.01), Status::Ok);
    assert_eq!(proxy.get_real(&[2]).unwrap(), vec![3.0]);
    proxy.free();
    let (report, calls) = clients.join().unwrap();
    let report = report.unwrap();
    assert_eq!(report.reason, ExitReason::Freed);
    assert_eq!(report.count(MessageKind::FreeInstance), 1);
    // setup, enter, exit, set, step, get, free
    assert_eq!(calls.load(Ordering::SeqCst), 7);
}

#[test]
fn wrong_protocol_version_is_rejected() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let addr = proxy.local_addr();
    let client = thread::spawn(move || {
        let mut conn = Connection::new(std::net::TcpStream::connect(addr).unwrap());
        let reply = conn
            .request_reply(
                &Message::Handshake(Handshake {
                    version: 2,
                    instance_name: "future".into(),
                    token: "t".into(),
                }),
                Duration::from_secs(5),
            )
            .unwrap();
        // Then a conforming client.
        let cfg = BackendConfig::new(addr.to_string(), "adder", "t");
        let mut model = builtin_model("adder").unwrap();
        (reply, connect_and_serve(&mut model, &cfg))
    });
    proxy.accept_backend().unwrap();
    assert_eq!(proxy.rejected_handshakes(), 1);
    proxy.free();
    let (reply, served) = client.join().unwrap();
    assert_eq!(reply.status(), Some(Status::Error));
    assert_eq!(served.unwrap().reason, ExitReason::Freed);
}

#[test]
fn first_frame_must_be_a_handshake() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let addr = proxy.local_addr();
    let client = thread::spawn(move || {
        let mut conn = Connection::new(std::net::TcpStream::connect(addr).unwrap());
        conn.send(&Message::EnterInitializationMode).unwrap();
        let reply = conn.receive(Some(Duration::from_secs(5))).map(Option::unwrap);
        let cfg = BackendConfig::new(addr.to_string(), "adder", "t");
        let mut model = builtin_model("adder").unwrap();
        (reply, connect_and_serve(&mut model, &cfg))
    });
    proxy.accept_backend().unwrap();
    proxy.free();
    let (reply, served) = client.join().unwrap();
    let reply = reply.unwrap();
    assert_eq!(reply.kind(), MessageKind::Handshake);
    assert_eq!(reply.status(), Some(Status::Error));
    assert!(served.is_ok());
}

#[test]
fn accept_timeout_without_backend() {
    let options = ProxyOptions {
        accept_timeout: Duration::from_millis(300),
        ..ProxyOptions::default()
    };
    let mut proxy = bind_proxy("adder", "t", options);
    let t0 = Instant::now();
    let err = proxy.accept_backend().unwrap_err();
    let waited = t0.elapsed();
    assert!(matches!(err, ProxyError::AcceptTimeout { .. }), "{err}");
    assert!(waited >= Duration::from_millis(300) && waited < Duration::from_secs(3), "{waited:?}");
    assert!(!proxy.is_connected());
}

/// Adder whose DO_STEP takes a fixed time.
struct SlowStep {
    inner: Box<dyn Model + Send>,
    delay: Duration,
}

impl Model for SlowStep {
    fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
        self.inner.set(vrs, values)
    }
    fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        self.inner.get(var_type, vrs)
    }
    fn do_step(&mut self, t: f64, h: f64) -> Status {
        thread::sleep(self.delay);
        self.inner.do_step(t, h)
    }
}

#[test]
fn silent_backend_errors_the_instance() {
    let options = ProxyOptions {
        call_timeout: Duration::from_millis(200),
        ..quick_options()
    };
    let mut proxy = bind_proxy("adder", "t", options);
    let cfg = backend_config(&proxy, "adder", "t");
    let backend = thread::spawn(move || {
        let mut model = SlowStep {
            inner: builtin_model("adder").unwrap(),
            delay: Duration::from_millis(800),
        };
        connect_and_serve(&mut model, &cfg)
    });
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    let t0 = Instant::now();
    assert_eq!(proxy.do_step(0.0, 0.1), Status::Fatal);
    assert!(t0.elapsed() < Duration::from_millis(700));
    assert_eq!(proxy.state(), InstanceState::Errored);
    assert!(!proxy.is_connected());
    let sent = proxy.wire_bytes_written();
    assert_eq!(proxy.do_step(0.1, 0.1), Status::Error);
    assert_eq!(proxy.get_real(&[2]), Err(Status::Error));
    assert_eq!(proxy.wire_bytes_written(), sent);
    proxy.free();
    assert!(proxy.is_freed());
    // The backend sees the connection gone when it replies or reads next.
    match backend.join().unwrap() {
        Ok(report) => assert_eq!(report.reason, ExitReason::Closed),
        Err(e) => assert!(matches!(e, BackendError::Wire(_)), "{e}"),
    }
}

#[test]
fn backend_disconnect_is_fatal() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let addr = proxy.local_addr();
    let client = thread::spawn(move || {
        let mut conn = Connection::new(std::net::TcpStream::connect(addr).unwrap());
        let reply = conn
            .request_reply(
                &Message::Handshake(Handshake {
                    version: 1,
                    instance_name: "flaky".into(),
                    token: "t".into(),
                }),
                Duration::from_secs(5),
            )
            .unwrap();
        assert_eq!(reply.status(), Some(Status::Ok));
        conn.shutdown();
    });
    proxy.accept_backend().unwrap();
    client.join().unwrap();
    assert_eq!(proxy.setup_experiment(0.0, None, None), Status::Fatal);
    assert_eq!(proxy.state(), InstanceState::Errored);
    assert!(proxy.last_error().is_some());
    proxy.free();
    proxy.free();
}

#[test]
fn free_from_each_reachable_state() {
    // Listening: no backend ever connected; the port is released.
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let addr = proxy.local_addr();
    proxy.free();
    assert!(proxy.is_freed() && !proxy.is_listening());
    TcpListener::bind(addr).expect("port released after free");
    assert_eq!(proxy.setup_experiment(0.0, None, None), Status::Error);

    // Instantiated, InitializationMode and StepMode: backend sees exactly one FREE_INSTANCE.
    for stop_in in [
        InstanceState::Instantiated,
        InstanceState::InitializationMode,
        InstanceState::StepMode,
    ] {
        let mut proxy = bind_proxy("adder", "t", quick_options());
        let (h, _) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
        proxy.accept_backend().unwrap();
        if stop_in != InstanceState::Instantiated {
            proxy.enter_initialization_mode();
        }
        if stop_in == InstanceState::StepMode {
            proxy.exit_initialization_mode();
        }
        assert_eq!(proxy.state(), stop_in);
        proxy.free();
        proxy.free();
        assert!(proxy.is_freed() && !proxy.is_connected());
        let report = h.join().unwrap().unwrap();
        assert_eq!(report.reason, ExitReason::Freed, "{stop_in}");
        assert_eq!(report.count(MessageKind::FreeInstance), 1, "{stop_in}");
    }
}

#[test]
fn dropping_the_proxy_frees_the_backend() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let (h, _) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    drop(proxy);
    assert_eq!(h.join().unwrap().unwrap().reason, ExitReason::Freed);
}

#[test]
fn reply_delay_shows_in_round_trips() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let cfg = backend_config(&proxy, "adder", "t").with_reply_delay(Duration::from_millis(150));
    let (h, _) = spawn_counting("adder", cfg);
    let t0 = Instant::now();
    proxy.accept_backend().unwrap();
    assert!(t0.elapsed() >= Duration::from_millis(150), "handshake is delayed too");
    init_adder(&mut proxy);
    for call in 0..3 {
        let t = Instant::now();
        assert_eq!(proxy.do_step(call as f64 * 0.1, 0.1), Status::Ok);
        let rtt = t.elapsed();
        assert!(rtt >= Duration::from_millis(150), "{rtt:?}");
    }
    proxy.free();
    h.join().unwrap().unwrap();
}

#[test]
fn calls_strictly_alternate_on_the_wire() {
    let options = ProxyOptions {
        trace: true,
        ..quick_options()
    };
    let mut proxy = bind_proxy("adder", "t", options);
    let (h, _) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    for k in 0..20 {
        proxy.set_real(&[0, 1], &[k as f64, 1.0]);
        proxy.do_step(k as f64, 1.0);
        proxy.get_real(&[2]).unwrap();
    }
    proxy.terminate();
    let trace = proxy.trace().to_vec();
    // handshake in, reply out, then request/reply pairs
    assert_eq!(trace[0], TraceEvent::Read(MessageKind::Handshake.code()));
    assert_eq!(trace[1], TraceEvent::Wrote(MessageKind::Handshake.reply_code()));
    let calls = &trace[2..];
    assert_eq!(calls.len() % 2, 0);
    for pair in calls.chunks(2) {
        match pair {
            [TraceEvent::Wrote(req), TraceEvent::Read(rep)] => assert_eq!(*rep, req | 0x80),
            other => panic!("not a request/reply pair: {other:?}"),
        }
    }
    assert_eq!(calls.len(), 2 * (3 + 60 + 1));
    proxy.free();
    h.join().unwrap().unwrap();
}

#[test]
fn locally_rejected_calls_put_nothing_on_the_wire() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let (h, calls) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    let before_bytes = proxy.wire_bytes_written();
    let before_calls = calls.load(Ordering::SeqCst);
    // real_c is an output
    assert_eq!(proxy.set_real(&[2], &[9.0]), Status::Error);
    // unknown value reference
    assert_eq!(proxy.get_real(&[42]), Err(Status::Error));
    assert_eq!(proxy.set(vec![0, 1], Values::Real(vec![1.0])), Status::Error);
    assert_eq!(proxy.enter_initialization_mode(), Status::Error);
    assert_eq!(proxy.wire_bytes_written(), before_bytes);
    assert_eq!(calls.load(Ordering::SeqCst), before_calls);
    assert_eq!(proxy.state(), InstanceState::StepMode);
    proxy.free();
    h.join().unwrap().unwrap();
}

#[test]
fn backend_error_status_passes_through() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let (h, _) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    assert_eq!(proxy.do_step(0.0, 0.0), Status::Error);
    // A model-level error is not a transport failure.
    assert_eq!(proxy.state(), InstanceState::StepMode);
    assert_eq!(proxy.do_step(0.0, 0.5), Status::Ok);
    proxy.free();
    h.join().unwrap().unwrap();
}

#[test]
fn all_four_types_round_trip_through_the_adder() {
    let mut proxy = bind_proxy("adder", "t", quick_options());
    let (h, _) = spawn_counting("adder", backend_config(&proxy, "adder", "t"));
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    assert_eq!(proxy.set(vec![0, 1], Values::Integer(vec![i32::MIN, 1])), Status::Ok);
    assert_eq!(proxy.set(vec![0, 1], Values::Boolean(vec![true, true])), Status::Ok);
    assert_eq!(
        proxy.set(vec![0, 1], Values::Text(vec!["co".into(), "sim ✓".into()])),
        Status::Ok
    );
    assert_eq!(proxy.set_real(&[0, 1], &[0.1, 0.2]), Status::Ok);
    assert_eq!(proxy.do_step(0.0, 1.0), Status::Ok);
    assert_eq!(proxy.get_real(&[2]).unwrap(), vec![0.1 + 0.2]);
    assert_eq!(
        proxy.get(VariableType::Integer, &[2]).unwrap(),
        Values::Integer(vec![i32::MIN.wrapping_sub(1)])
    );
    assert_eq!(
        proxy.get(VariableType::Boolean, &[2]).unwrap(),
        Values::Boolean(vec![true])
    );
    assert_eq!(
        proxy.get(VariableType::Text, &[2, 0]).unwrap(),
        Values::Text(vec!["cosim ✓".into(), "co".into()])
    );
    proxy.free();
    h.join().unwrap().unwrap();
}

#[test]
fn socket_roles_are_one_directional() {
    let audit = SocketAudit::new();
    let options = ProxyOptions {
        audit: audit.clone(),
        ..quick_options()
    };
    let mut proxy = bind_proxy("adder", "t", options);
    let cfg = backend_config(&proxy, "adder-backend", "t").with_audit(audit.clone());
    let (h, _) = spawn_counting("adder", cfg);
    proxy.accept_backend().unwrap();
    init_adder(&mut proxy);
    proxy.free();
    h.join().unwrap().unwrap();
    for e in audit.events() {
        match e.role {
            Role::Proxy => assert!(
                matches!(e.op, SocketOp::Bind | SocketOp::Listen | SocketOp::Accept),
                "{e:?}"
            ),
            Role::Backend => assert_eq!(e.op, SocketOp::Connect, "{e:?}"),
        }
    }
    assert_eq!(audit.count(Role::Backend, SocketOp::Connect), 1);
    assert_eq!(audit.count(Role::Proxy, SocketOp::Listen), 1);
}

#[test]
fn backend_retries_until_the_proxy_listens() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let audit = SocketAudit::new();
    let cfg = BackendConfig::new(format!("127.0.0.1:{port}"), "adder", "t").with_audit(audit.clone());
    let (h, _) = spawn_counting("adder", cfg);
    thread::sleep(Duration::from_millis(700));
    let mut proxy = cosim::proxy::ProxyInstance::bind(
        "adder",
        cosim::backend::builtin_descriptor("adder").unwrap(),
        &format!("127.0.0.1:{port}"),
        "t",
        quick_options(),
    )
    .unwrap();
    proxy.accept_backend().unwrap();
    proxy.free();
    h.join().unwrap().unwrap();
    let attempts = audit.count_for("adder", SocketOp::Connect);
    assert!((2..=5).contains(&attempts), "{attempts}");
}

#[test]
fn backend_gives_up_after_its_retry_budget() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = BackendConfig::new(format!("127.0.0.1:{port}"), "adder", "t");
    cfg.retry = RetryPolicy {
        attempts: 3,
        interval: Duration::from_millis(100),
    };
    let t0 = Instant::now();
    let mut model = builtin_model("adder").unwrap();
    let err = connect_and_serve(&mut model, &cfg).unwrap_err();
    assert!(matches!(err, BackendError::ConnectFailed { attempts: 3, .. }), "{err}");
    assert!(t0.elapsed() >= Duration::from_millis(200));
}

#[test]
fn default_retry_policy() {
    assert_eq!(
        RetryPolicy::default(),
        RetryPolicy {
            attempts: 5,
            interval: Duration::from_millis(500)
        }
    );
}
