use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use cosim::backend::{self, run_reference_simulation_with, BackendConfig, BackendError, ReferenceParams};
use cosim::descriptor::load_scenario;
use cosim::master::{
    bench_scenario, run_adder_loop, run_scenario, sibling_path, timing_csv, write_file, AdderLoop, MasterError,
    MasterOptions, RunOutcome,
};
use cosim::metrics::{compare_runs, load_totals_csv, RunMode, TimingReport};
use cosim::proxy::{ProxyInstance, ProxyOptions, DEFAULT_ACCEPT_TIMEOUT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_AUTH: i32 = 3;

const TOKEN_ENV: &str = "COSIM_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "cosim", version, about = "Distributed co-simulation with dial-out model backends")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario file; backends are started separately and dial in.
    Master {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's real_time flag.
        #[arg(long)]
        mode: Option<RunMode>,
        /// Seconds to wait for each backend.
        #[arg(long, default_value_t = DEFAULT_ACCEPT_TIMEOUT.as_secs_f64())]
        accept_timeout: f64,
        /// Call units one after another instead of concurrently.
        #[arg(long)]
        sequential: bool,
        /// Print the timing report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve a built-in model to a proxy.
    Backend {
        /// adder, controller, motor or generator
        #[arg(long)]
        model: String,
        /// Proxy address, host:port.
        #[arg(long)]
        connect: String,
        #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
        token: String,
        /// Sleep before every frame sent, emulating a slow link.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        /// Instance name sent in the handshake (defaults to the model name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Scripted adder loop against one backend process.
    Demo1 {
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long, default_value_t = 0.01)]
        step_size: f64,
        #[arg(long, default_value = "fast")]
        mode: RunMode,
        /// Listening port; 0 picks a free one.
        #[arg(long, default_value_t = 7001)]
        base_port: u16,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Column name for this run in comparison tables.
        #[arg(long, default_value = "loopback")]
        label: String,
        #[arg(long)]
        json: bool,
    },
    /// Controller / motor / generator bench, three backend processes.
    Demo2 {
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long, default_value_t = 50.0)]
        end_time: f64,
        #[arg(long, default_value = "fast")]
        mode: RunMode,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
        /// First of three consecutive listening ports; 0 picks free ones.
        #[arg(long, default_value_t = 7001)]
        base_port: u16,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value = "loopback")]
        label: String,
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        json: bool,
    },
    /// Compare timing reports written by earlier runs.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Cmd::Master {
            scenario,
            mode,
            accept_timeout,
            sequential,
            json,
        } => cmd_master(&scenario, mode, accept_timeout, sequential, json),
        Cmd::Backend {
            model,
            connect,
            token,
            delay_ms,
            name,
        } => cmd_backend(&model, &connect, &token, delay_ms, name),
        Cmd::Demo1 {
            iterations,
            step_size,
            mode,
            base_port,
            delay_ms,
            out_dir,
            label,
            json,
        } => {
            if iterations == 0 || !(step_size > 0.0) {
                eprintln!("error: --iterations must be > 0 and --step-size > 0");
                return EXIT_USAGE;
            }
            cmd_demo1(
                AdderLoop {
                    iterations,
                    step_size,
                    mode,
                },
                base_port,
                delay_ms,
                &out_dir,
                &label,
                json,
            )
        }
        Cmd::Demo2 {
            step_size,
            end_time,
            mode,
            delay_ms,
            base_port,
            out_dir,
            label,
            sequential,
            json,
        } => {
            if !(step_size > 0.0) || !(end_time > 0.0) || cosim::descriptor::step_count(0.0, end_time, step_size) == 0 {
                eprintln!("error: --step-size and --end-time must be positive and cover at least one step");
                return EXIT_USAGE;
            }
            cmd_demo2(
                step_size, end_time, mode, delay_ms, base_port, &out_dir, &label, sequential, json,
            )
        }
        Cmd::Report { reports, csv } => cmd_report(&reports, csv),
    }
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let handler_flag = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || handler_flag.store(true, Ordering::SeqCst)) {
        warn!("could not install interrupt handler: {e}");
    }
    flag
}

fn runtime_failure(e: &MasterError) -> i32 {
    error!("{e}");
    eprintln!("error: {e}");
    match e {
        MasterError::Scenario(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn print_report(report: &TimingReport, json: bool) {
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.summary_text());
    }
}

fn cmd_master(scenario_path: &Path, mode: Option<RunMode>, accept_timeout: f64, sequential: bool, json: bool) -> i32 {
    let scenario = match load_scenario(scenario_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if !(accept_timeout > 0.0) {
        eprintln!("error: --accept-timeout must be > 0");
        return EXIT_USAGE;
    }
    let mode = mode.unwrap_or(if scenario.real_time {
        RunMode::RealTime
    } else {
        RunMode::AsFastAsPossible
    });
    let output_path = scenario.output_path.clone();
    let label = scenario_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let options = MasterOptions {
        proxy: ProxyOptions {
            accept_timeout: Duration::from_secs_f64(accept_timeout),
            ..ProxyOptions::default()
        },
        parallel: !sequential,
        interrupt: Some(interrupt_flag()),
    };
    let result = run_scenario(scenario, options, mode, |addrs| {
        for a in addrs {
            info!("waiting for backend on {a}");
        }
    });
    match result {
        Ok(outcome) => match write_outputs(&output_path, &outcome, "master", &label) {
            Ok(report) => {
                print_report(&report, json);
                EXIT_OK
            }
            Err(e) => runtime_failure(&e),
        },
        Err(e) => runtime_failure(&e),
    }
}

/// Trajectory at `path`, timing CSV and report JSON next to it.
fn write_outputs(path: &Path, outcome: &RunOutcome, demo: &str, label: &str) -> Result<TimingReport, MasterError> {
    write_file(path, &outcome.trajectory.to_csv())?;
    let report = outcome.report.clone().labeled(demo, label);
    write_file(&sibling_path(path, "timing.csv"), &timing_csv(&outcome.records))?;
    write_file(&sibling_path(path, "report.json"), &report.to_json())?;
    Ok(report)
}

fn cmd_backend(model: &str, connect: &str, token: &str, delay_ms: u64, name: Option<String>) -> i32 {
    let Some(mut instance) = backend::builtin_model(model) else {
        eprintln!(
            "error: unknown model {model:?} (expected one of {})",
            backend::BUILTIN_MODELS.join(", ")
        );
        return EXIT_USAGE;
    };
    let config = BackendConfig::new(connect, name.unwrap_or_else(|| model.to_owned()), token)
        .with_reply_delay(Duration::from_millis(delay_ms));
    match backend::connect_and_serve(&mut instance, &config) {
        Ok(report) => {
            println!("{}", report.to_json_line());
            EXIT_OK
        }
        Err(e @ BackendError::AuthenticationRejected(_)) => {
            eprintln!("error: {e}");
            EXIT_AUTH
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn session_token() -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!("{:x}-{:x}", nanos, std::process::id())
}

/// Starts `cosim backend` as a child process; the token goes through the
/// environment so it does not show up in process listings.
fn spawn_backend_process(model: &str, addr: SocketAddr, token: &str, delay_ms: u64) -> std::io::Result<Child> {
    let exe = std::env::current_exe()?;
    Command::new(exe)
        .arg("backend")
        .args(["--model", model, "--connect", &addr.to_string()])
        .args(["--delay-ms", &delay_ms.to_string()])
        .env(TOKEN_ENV, token)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .spawn()
}

/// Waits for the children, killing any still alive after `grace`. Returns
/// each child's exit report line when it printed one.
fn reap(children: Vec<(String, Child)>, grace: Duration) -> Vec<(String, Option<String>)> {
    let deadline = Instant::now() + grace;
    let mut out = Vec::new();
    for (name, mut child) in children {
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                _ => {
                    warn!("backend {name} still running; killing it");
                    let _ = child.kill();
                    break;
                }
            }
        }
        let line = child
            .wait_with_output()
            .ok()
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .and_then(|s| s.lines().last().map(str::to_owned));
        out.push((name, line));
    }
    out
}

fn cmd_demo1(cfg: AdderLoop, base_port: u16, delay_ms: u64, out_dir: &Path, label: &str, json: bool) -> i32 {
    let interrupt = interrupt_flag();
    let token = session_token();
    let descriptor = backend::builtin_descriptor("adder").expect("built-in");
    let mut proxy = match ProxyInstance::bind(
        "adder",
        descriptor,
        &format!("127.0.0.1:{base_port}"),
        &token,
        ProxyOptions::default(),
    ) {
        Ok(p) => p,
        Err(e) => return runtime_failure(&e.into()),
    };
    let child = match spawn_backend_process("adder", proxy.local_addr(), &token, delay_ms) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: cannot start backend process: {e}");
            return EXIT_RUNTIME;
        }
    };
    let result = proxy
        .accept_backend()
        .map_err(MasterError::from)
        .and_then(|()| run_adder_loop(&mut proxy, &cfg, Some(&interrupt)));
    proxy.free();
    let exits = reap(vec![("adder".to_owned(), child)], Duration::from_secs(5));
    for (name, line) in &exits {
        info!("backend {name} exit: {}", line.as_deref().unwrap_or("-"));
    }
    let (records, report) = match result {
        Ok(r) => r,
        Err(e) => return runtime_failure(&e),
    };
    let report = report.labeled("Demo 1", label);
    let stem = out_dir.join(format!("demo1_{}", cfg.mode.keyword()));
    let written = write_file(&sibling_path(&stem, "timing.csv"), &timing_csv(&records))
        .and_then(|()| write_file(&sibling_path(&stem, "report.json"), &report.to_json()));
    if let Err(e) = written {
        return runtime_failure(&e);
    }
    print_report(&report, json);
    EXIT_OK
}

#[allow(clippy::too_many_arguments)]
fn cmd_demo2(
    step_size: f64,
    end_time: f64,
    mode: RunMode,
    delay_ms: u64,
    base_port: u16,
    out_dir: &Path,
    label: &str,
    sequential: bool,
    json: bool,
) -> i32 {
    let scenario = bench_scenario(base_port, step_size, end_time, mode == RunMode::RealTime);
    let units: Vec<(String, String)> = scenario
        .units
        .iter()
        .map(|u| (u.unit_name.clone(), u.auth_token.clone()))
        .collect();
    let options = MasterOptions {
        proxy: ProxyOptions::default(),
        parallel: !sequential,
        interrupt: Some(interrupt_flag()),
    };
    let mut children = Vec::new();
    let mut spawn_error = None;
    let result = run_scenario(scenario, options, mode, |addrs| {
        for ((name, token), addr) in units.iter().zip(addrs) {
            match spawn_backend_process(name, *addr, token, delay_ms) {
                Ok(c) => children.push((name.clone(), c)),
                Err(e) => spawn_error = Some(format!("cannot start backend {name}: {e}")),
            }
        }
    });
    reap(children, Duration::from_secs(5));
    if let Some(e) = spawn_error {
        eprintln!("error: {e}");
        return EXIT_RUNTIME;
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => return runtime_failure(&e),
    };
    let path = out_dir.join(format!("demo2_{}_trajectory.csv", mode.keyword()));
    let report = match write_outputs(&path, &outcome, "Demo 2", label) {
        Ok(r) => r,
        Err(e) => return runtime_failure(&e),
    };
    print_report(&report, json);
    let reference = run_reference_simulation_with(&ReferenceParams::default(), 0.0, step_size, end_time);
    let deviation = ["controller.tau_cmd", "motor.tau_mot", "generator.omega"]
        .iter()
        .zip([
            reference.iter().map(|r| r.tau_cmd).collect::<Vec<_>>(),
            reference.iter().map(|r| r.tau_mot).collect(),
            reference.iter().map(|r| r.omega).collect(),
        ])
        .flat_map(|(col, want)| {
            outcome
                .trajectory
                .reals(col)
                .into_iter()
                .zip(want)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0_f64, f64::max);
    if !json {
        println!("{:<20} {deviation:e}", "max |Δ| vs local");
    }
    EXIT_OK
}

fn cmd_report(paths: &[PathBuf], csv: bool) -> i32 {
    let mut reports = Vec::new();
    for path in paths {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: reading {}: {e}", path.display());
                return EXIT_USAGE;
            }
        };
        let parsed = if path.extension().is_some_and(|e| e == "csv") {
            load_totals_csv(&text)
        } else {
            TimingReport::from_json(&text).map(|r| vec![r])
        };
        match parsed {
            Ok(r) => reports.extend(r),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                return EXIT_USAGE;
            }
        }
    }
    if reports.len() == 1 {
        print!("{}", reports[0].summary_text());
        return EXIT_OK;
    }
    match compare_runs(&reports) {
        Ok(table) => {
            if csv {
                print!("{}", table.to_csv());
            } else {
                print!("{}", table.render_text());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
