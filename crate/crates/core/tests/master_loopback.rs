mod support;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cosim::backend::{
    builtin_descriptor, builtin_model, connect_and_serve, controller_update, motor_update, run_reference_simulation,
    BackendConfig, ExitReason, Model, DEFAULT_CONTROLLER, DEFAULT_MOTOR_TIME_CONSTANT,
};
use cosim::descriptor::{load_scenario, parse_scenario, ScenarioConfig, VariableType};
use cosim::master::{bench_scenario, run_scenario, MasterError, MasterOptions, RunOutcome};
use cosim::metrics::RunMode;
use cosim::wire::{MessageKind, Status, Values};

use support::{quick_options, BackendHandle};

fn options(parallel: bool) -> MasterOptions {
    MasterOptions {
        proxy: quick_options(),
        parallel,
        interrupt: None,
    }
}

/// Starts one thread backend per unit, each serving the model `pick` returns.
fn launch_with(
    scenario: &ScenarioConfig,
    pick: impl Fn(&str) -> Box<dyn Model + Send>,
    addrs: &[SocketAddr],
    handles: &mut Vec<(String, BackendHandle)>,
) {
    for (unit, addr) in scenario.units.iter().zip(addrs) {
        let mut model = pick(&unit.unit_name);
        let cfg = BackendConfig::new(addr.to_string(), unit.unit_name.clone(), unit.auth_token.clone());
        handles.push((
            unit.unit_name.clone(),
            thread::spawn(move || connect_and_serve(&mut model, &cfg)),
        ));
    }
}

fn run_bench(scenario: ScenarioConfig, opts: MasterOptions, mode: RunMode) -> (Result<RunOutcome, MasterError>, Vec<(String, BackendHandle)>) {
    let mut handles = Vec::new();
    let copy = scenario.clone();
    let result = run_scenario(scenario, opts, mode, |addrs| {
        launch_with(&copy, |name| builtin_model(name).unwrap(), addrs, &mut handles)
    });
    (result, handles)
}

fn assert_all_freed(handles: Vec<(String, BackendHandle)>) {
    for (name, h) in handles {
        let report = h.join().unwrap().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(report.reason, ExitReason::Freed, "{name}");
        assert_eq!(report.count(MessageKind::FreeInstance), 1, "{name}");
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn bench_matches_single_process_reference_bit_for_bit() {
    for parallel in [false, true] {
        let (result, handles) = run_bench(bench_scenario(0, 0.1, 50.0, false), options(parallel), RunMode::AsFastAsPossible);
        let outcome = result.unwrap();
        assert_all_freed(handles);
        let reference = run_reference_simulation(0.1, 50.0);
        let t = &outcome.trajectory;
        assert_eq!(t.rows.len(), 500);
        assert_eq!(
            bits(&t.reals("controller.tau_cmd")),
            bits(&reference.iter().map(|r| r.tau_cmd).collect::<Vec<_>>())
        );
        assert_eq!(
            bits(&t.reals("motor.tau_mot")),
            bits(&reference.iter().map(|r| r.tau_mot).collect::<Vec<_>>())
        );
        assert_eq!(
            bits(&t.reals("generator.omega")),
            bits(&reference.iter().map(|r| r.omega).collect::<Vec<_>>())
        );
        for (row, r) in t.rows.iter().zip(&reference) {
            assert_eq!(row.time, r.time);
        }
        assert_eq!(outcome.report.steps, 500);
        assert_eq!(outcome.report.overrun_count, 0);
    }
}

#[test]
fn two_unit_chain_sees_previous_step_outputs() {
    let text = r#"{
        "units": [
            {"unit_name": "controller", "descriptor": "controller.json", "listen": "127.0.0.1:0", "token": "a"},
            {"unit_name": "motor", "descriptor": "motor.json", "listen": "127.0.0.1:0", "token": "b"}
        ],
        "connections": [{"source": "controller.tau_cmd", "target": "motor.tau_cmd_in"}],
        "capture": ["controller.omega_meas"],
        "step_size": 0.05, "start_time": 1.0, "end_time": 2.0,
        "real_time": false, "output_path": "chain.csv"
    }"#;
    let descriptors: HashMap<String, _> = [
        ("controller".to_owned(), builtin_descriptor("controller").unwrap()),
        ("motor".to_owned(), builtin_descriptor("motor").unwrap()),
    ]
    .into();
    let scenario = parse_scenario(text, &descriptors).unwrap();
    let (result, handles) = run_bench(scenario, options(true), RunMode::AsFastAsPossible);
    let outcome = result.unwrap();
    assert_all_freed(handles);
    let t = &outcome.trajectory;
    assert_eq!(t.columns, ["controller.tau_cmd", "controller.omega_meas", "motor.tau_mot"]);
    assert_eq!(t.rows.len(), 20);
    assert_eq!(t.rows[0].time, 1.0 + 0.05);

    let h = 0.05;
    let mut integral = 0.0;
    let mut tau_prev = 0.0;
    let mut motor = 0.0;
    let tau = t.reals("controller.tau_cmd");
    let tau_mot = t.reals("motor.tau_mot");
    for k in 0..20 {
        let expect_tau = controller_update(&DEFAULT_CONTROLLER, &mut integral, 0.0, h);
        // the motor integrates the command from one step earlier
        motor = motor_update(DEFAULT_MOTOR_TIME_CONSTANT, motor, tau_prev, h);
        assert_eq!(tau[k], expect_tau, "step {k}");
        assert_eq!(tau_mot[k], motor, "step {k}");
        tau_prev = expect_tau;
    }
    assert_eq!(tau_mot[0], 0.0);
    assert!(t.reals("controller.omega_meas").iter().all(|w| *w == 0.0));
}

#[test]
fn real_time_pacing_does_not_change_results() {
    let (fast, h1) = run_bench(bench_scenario(0, 0.05, 1.0, false), options(true), RunMode::AsFastAsPossible);
    let (paced, h2) = run_bench(bench_scenario(0, 0.05, 1.0, true), options(false), RunMode::RealTime);
    let (fast, paced) = (fast.unwrap(), paced.unwrap());
    assert_all_freed(h1);
    assert_all_freed(h2);
    assert_eq!(fast.trajectory, paced.trajectory);
    assert!(paced.report.total_wall >= 1.0, "{}", paced.report.total_wall);
    assert!(paced.report.total_wall < 1.5, "{}", paced.report.total_wall);
    assert_eq!(paced.report.overrun_count, 0);
    assert!(fast.report.total_wall < paced.report.total_wall);
}

#[test]
fn delayed_backends_overrun_every_step() {
    let scenario = bench_scenario(0, 0.1, 0.5, true);
    let copy = scenario.clone();
    let mut handles = Vec::new();
    let outcome = run_scenario(scenario, options(true), RunMode::RealTime, |addrs| {
        for (unit, addr) in copy.units.iter().zip(addrs) {
            let cfg = BackendConfig::new(addr.to_string(), unit.unit_name.clone(), unit.auth_token.clone())
                .with_reply_delay(Duration::from_millis(150));
            handles.push((unit.unit_name.clone(), cosim::backend::spawn_builtin_backend(&unit.unit_name, cfg)));
        }
    })
    .unwrap();
    assert_all_freed(handles);
    assert_eq!(outcome.report.steps, 5);
    assert_eq!(outcome.report.overrun_count, 5);
    assert!(outcome.records.iter().all(|r| r.wall_duration > 0.1));
    assert!(outcome.report.is_realtime_infeasible());
    let reference = run_reference_simulation(0.1, 0.5);
    assert_eq!(
        bits(&outcome.trajectory.reals("generator.omega")),
        bits(&reference.iter().map(|r| r.omega).collect::<Vec<_>>())
    );
}

/// Delegates to a built-in model but fails one chosen call.
struct Faulty {
    inner: Box<dyn Model + Send>,
    fail_enter_init: bool,
    fail_step_at: Option<usize>,
    steps: usize,
}

impl Model for Faulty {
    fn enter_initialization_mode(&mut self) -> Status {
        if self.fail_enter_init {
            Status::Error
        } else {
            Status::Ok
        }
    }
    fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
        self.inner.set(vrs, values)
    }
    fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        self.inner.get(var_type, vrs)
    }
    fn do_step(&mut self, t: f64, h: f64) -> Status {
        let k = self.steps;
        self.steps += 1;
        if self.fail_step_at == Some(k) {
            return Status::Discard;
        }
        self.inner.do_step(t, h)
    }
}

fn faulty(name: &str, bad_unit: &str, fail_enter_init: bool, fail_step_at: Option<usize>) -> Box<dyn Model + Send> {
    let bad = name == bad_unit;
    Box::new(Faulty {
        inner: builtin_model(name).unwrap(),
        fail_enter_init: bad && fail_enter_init,
        fail_step_at: if bad { fail_step_at } else { None },
        steps: 0,
    })
}

#[test]
fn initialization_failure_names_the_unit_and_frees_everyone() {
    let scenario = bench_scenario(0, 0.1, 1.0, false);
    let copy = scenario.clone();
    let mut handles = Vec::new();
    let err = run_scenario(scenario, options(true), RunMode::AsFastAsPossible, |addrs| {
        launch_with(&copy, |n| faulty(n, "motor", true, None), addrs, &mut handles)
    })
    .unwrap_err();
    match &err {
        MasterError::Init { unit, call, status, .. } => {
            assert_eq!(unit, "motor");
            assert_eq!(*call, MessageKind::EnterInitializationMode);
            assert_eq!(*status, Status::Error);
        }
        other => panic!("{other}"),
    }
    assert_eq!(err.unit(), Some("motor"));
    assert_all_freed(handles);
}

#[test]
fn step_failure_names_unit_and_step() {
    let scenario = bench_scenario(0, 0.1, 1.0, false);
    let copy = scenario.clone();
    let mut handles = Vec::new();
    let err = run_scenario(scenario, options(false), RunMode::AsFastAsPossible, |addrs| {
        launch_with(&copy, |n| faulty(n, "generator", false, Some(3)), addrs, &mut handles)
    })
    .unwrap_err();
    match &err {
        MasterError::Step {
            unit,
            step,
            call,
            status,
            ..
        } => {
            assert_eq!((unit.as_str(), *step), ("generator", 3));
            assert_eq!((*call, *status), (MessageKind::DoStep, Status::Discard));
        }
        other => panic!("{other}"),
    }
    assert!(err.to_string().contains("generator") && err.to_string().contains("step 3"));
    assert_all_freed(handles);
}

#[test]
fn interrupt_stops_before_the_next_step_and_frees() {
    let flag = Arc::new(AtomicBool::new(true));
    let opts = MasterOptions {
        interrupt: Some(flag),
        ..options(true)
    };
    let (result, handles) = run_bench(bench_scenario(0, 0.1, 1.0, false), opts, RunMode::AsFastAsPossible);
    assert!(matches!(result, Err(MasterError::Interrupted { step: 0 })));
    assert_all_freed(handles);
}

#[test]
fn missing_backend_times_out_and_frees_the_others() {
    let mut scenario = bench_scenario(0, 0.1, 1.0, false);
    let copy = scenario.clone();
    scenario.units.truncate(3);
    let opts = MasterOptions {
        proxy: cosim::proxy::ProxyOptions {
            accept_timeout: Duration::from_millis(500),
            ..quick_options()
        },
        ..options(true)
    };
    let mut handles = Vec::new();
    let err = run_scenario(scenario, opts, RunMode::AsFastAsPossible, |addrs| {
        // no generator backend
        launch_with(&copy, |n| builtin_model(n).unwrap(), &addrs[..2], &mut handles)
    })
    .unwrap_err();
    assert_eq!(err.unit(), Some("generator"), "{err}");
    assert!(matches!(err, MasterError::Proxy(cosim::proxy::ProxyError::AcceptTimeout { .. })));
    assert_all_freed(handles);
}

#[test]
fn shipped_scenario_file_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo2_scenario.json");
    let s = load_scenario(&path).unwrap();
    assert_eq!(s.units.len(), 3);
    assert_eq!(s.step_count(), 500);
    assert_eq!(s.units[0].descriptor, builtin_descriptor("controller").unwrap());
}
