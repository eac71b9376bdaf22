//! Fixed-step Jacobi master.
//!
//! Every communication step first advances all units from `t_k` to
//! `t_k + h`, then reads the connected outputs and writes them into the
//! connected inputs. A unit therefore always sees its neighbours' outputs
//! from the previous communication point.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use crate::backend::builtin_descriptor;
use crate::descriptor::{
    parse_scenario, Causality, DescriptorError, Endpoint, ModelDescriptor, ResolvedEndpoint, ScalarValue, ScenarioConfig,
    VariableType,
};
use crate::metrics::{finalize_report, process_cpu_seconds, RunMode, TimingRecord, TimingReport};
use crate::proxy::{InstanceState, ProxyError, ProxyInstance, ProxyOptions};
use crate::wire::{MessageKind, Status, Values};

#[derive(Debug, Clone, Default)]
pub struct MasterOptions {
    pub proxy: ProxyOptions,
    /// Issue each phase's per-unit calls concurrently, one thread per unit.
    /// Results are identical either way; only wall time differs.
    pub parallel: bool,
    pub interrupt: Option<Arc<AtomicBool>>,
}

impl MasterOptions {
    pub fn interrupted(&self) -> bool {
        self.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Error)]
pub enum MasterError {
    #[error(transparent)]
    Scenario(#[from] DescriptorError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("unit {unit}: {call} failed during initialization with status {status}{}", detail_suffix(.detail))]
    Init {
        unit: String,
        call: MessageKind,
        status: Status,
        detail: Option<String>,
    },
    #[error("unit {unit}: {call} failed at step {step} with status {status}{}", detail_suffix(.detail))]
    Step {
        unit: String,
        step: u64,
        call: MessageKind,
        status: Status,
        detail: Option<String>,
    },
    #[error("unit {unit}: unexpected result at step {step}: {detail}")]
    Check { unit: String, step: u64, detail: String },
    #[error("interrupted before step {step}")]
    Interrupted { step: u64 },
    #[error("writing {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn detail_suffix(detail: &Option<String>) -> String {
    detail.as_ref().map(|d| format!(" ({d})")).unwrap_or_default()
}

impl MasterError {
    /// Unit the failure is attributed to, if any.
    pub fn unit(&self) -> Option<&str> {
        match self {
            MasterError::Init { unit, .. } | MasterError::Step { unit, .. } | MasterError::Check { unit, .. } => {
                Some(unit)
            }
            MasterError::Proxy(ProxyError::Bind { unit, .. })
            | MasterError::Proxy(ProxyError::AcceptTimeout { unit, .. })
            | MasterError::Proxy(ProxyError::NotListening { unit, .. })
            | MasterError::Proxy(ProxyError::Io { unit, .. }) => Some(unit),
            _ => None,
        }
    }
}

/// Sampled variable values, one row per completed communication step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// `unit.variable` for every recorded variable.
    pub columns: Vec<String>,
    pub rows: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    /// Communication point reached by this step.
    pub time: f64,
    pub values: Vec<ScalarValue>,
}

impl Trajectory {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of a Real column. Panics if the column is missing or not Real.
    pub fn reals(&self, name: &str) -> Vec<f64> {
        let i = self.column(name).unwrap_or_else(|| panic!("no column {name}"));
        self.rows
            .iter()
            .map(|r| match &r.values[i] {
                ScalarValue::Real(v) => *v,
                other => panic!("{name} is not Real: {other:?}"),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_owned(), "time".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.step.to_string(), format_real(row.time)];
            rec.extend(row.values.iter().map(|v| match v {
                ScalarValue::Real(x) => format_real(*x),
                ScalarValue::Integer(i) => i.to_string(),
                ScalarValue::Boolean(b) => b.to_string(),
                ScalarValue::Text(s) => s.clone(),
            }));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn timing_csv(records: &[TimingRecord]) -> String {
    let mut out = String::from("step,wall_seconds,overrun\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step_index, format_real(r.wall_duration), r.overrun));
    }
    out
}

/// `<dir>/<stem>_timing.csv` next to a trajectory path.
pub fn sibling_path(trajectory: &Path, suffix: &str) -> PathBuf {
    let stem = trajectory
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_owned());
    trajectory.with_file_name(format!("{stem}_{suffix}"))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), MasterError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| MasterError::Output {
            path: dir.to_owned(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| MasterError::Output {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub records: Vec<TimingRecord>,
    pub report: TimingReport,
}

/// Wall-clock bookkeeping for one run: step durations, overruns and, in
/// real-time mode, sleeping until each step's deadline.
#[derive(Debug)]
pub struct Pacer {
    mode: RunMode,
    step_size: f64,
    wall_start: Instant,
    step_start: Instant,
    records: Vec<TimingRecord>,
}

impl Pacer {
    pub fn start(mode: RunMode, step_size: f64) -> Self {
        let now = Instant::now();
        Pacer {
            mode,
            step_size,
            wall_start: now,
            step_start: now,
            records: Vec::new(),
        }
    }

    /// Closes step `k` (0-based). Deadlines are absolute, `start + (k+1)·h`,
    /// so a late step does not push back the ones after it.
    pub fn finish_step(&mut self, k: u64) -> TimingRecord {
        let work_end = Instant::now();
        let deadline = self.wall_start + Duration::from_secs_f64((k + 1) as f64 * self.step_size);
        let overrun = match self.mode {
            RunMode::AsFastAsPossible => false,
            RunMode::RealTime => work_end > deadline,
        };
        if self.mode == RunMode::RealTime && !overrun {
            sleep_until(deadline);
        }
        let end = Instant::now();
        let record = TimingRecord {
            step_index: k,
            wall_duration: (end - self.step_start).as_secs_f64(),
            overrun,
        };
        self.step_start = end;
        self.records.push(record);
        record
    }

    pub fn records(&self) -> &[TimingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TimingRecord> {
        self.records
    }
}

fn sleep_until(deadline: Instant) {
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        thread::sleep(deadline - now);
    }
}

type ValueKey = (VariableType, u32);

#[derive(Debug, Clone)]
struct UnitPlan {
    /// GET calls issued after every step, grouped by type.
    reads: Vec<(VariableType, Vec<u32>)>,
    /// Inputs fed by connections: `(type, target vr, source unit, source vr)`.
    feeds: Vec<(VariableType, u32, usize, u32)>,
}

/// A running co-simulation: one proxy per unit plus the coupling plan.
#[derive(Debug)]
pub struct CoSimSession {
    scenario: ScenarioConfig,
    options: MasterOptions,
    proxies: Vec<ProxyInstance>,
    plans: Vec<UnitPlan>,
    recorded: Vec<ResolvedEndpoint>,
    latest: Vec<HashMap<ValueKey, ScalarValue>>,
    steps_done: u64,
    shut_down: bool,
}

impl CoSimSession {
    /// Binds every unit's listener. Nothing is accepted yet, so backends
    /// may be launched as soon as this returns.
    pub fn bind(scenario: ScenarioConfig, options: MasterOptions) -> Result<Self, MasterError> {
        let mut proxies = Vec::with_capacity(scenario.units.len());
        for unit in &scenario.units {
            // Earlier proxies are freed on drop if a later bind fails.
            proxies.push(ProxyInstance::bind(
                &unit.unit_name,
                unit.descriptor.clone(),
                &unit.listen_address,
                &unit.auth_token,
                options.proxy.clone(),
            )?);
        }
        let (plans, recorded) = build_plans(&scenario);
        let latest = vec![HashMap::new(); scenario.units.len()];
        Ok(CoSimSession {
            scenario,
            options,
            proxies,
            plans,
            recorded,
            latest,
            steps_done: 0,
            shut_down: false,
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn local_addrs(&self) -> Vec<SocketAddr> {
        self.proxies.iter().map(|p| p.local_addr()).collect()
    }

    pub fn proxies(&self) -> &[ProxyInstance] {
        &self.proxies
    }

    /// `unit.variable` names of the trajectory columns.
    pub fn recorded_columns(&self) -> Vec<String> {
        self.recorded.iter().map(|e| e.endpoint.to_string()).collect()
    }

    /// Waits for every backend in unit order.
    pub fn accept_all(&mut self) -> Result<(), MasterError> {
        for proxy in &mut self.proxies {
            proxy.accept_backend()?;
        }
        Ok(())
    }

    /// Setup, start values, initialization mode, then one propagation of the
    /// initial outputs so every connected input starts from its source.
    pub fn initialize(&mut self) -> Result<(), MasterError> {
        let start = self.scenario.start_time;
        let stop = self.scenario.end_time;
        for proxy in &mut self.proxies {
            let unit = proxy.unit_name().to_owned();
            let init_err = |call, status, proxy: &ProxyInstance| MasterError::Init {
                unit: unit.clone(),
                call,
                status,
                detail: proxy.last_error().map(str::to_owned),
            };
            let status = proxy.setup_experiment(start, Some(stop), None);
            if !status.is_success() {
                return Err(init_err(MessageKind::SetupExperiment, status, proxy));
            }
            let descriptor = proxy.descriptor().clone();
            if let Some((kind, status)) = set_starts(proxy, &descriptor, Causality::Parameter) {
                return Err(init_err(kind, status, proxy));
            }
            let status = proxy.enter_initialization_mode();
            if !status.is_success() {
                return Err(init_err(MessageKind::EnterInitializationMode, status, proxy));
            }
            if let Some((kind, status)) = set_starts(proxy, &descriptor, Causality::Input) {
                return Err(init_err(kind, status, proxy));
            }
            let status = proxy.exit_initialization_mode();
            if !status.is_success() {
                return Err(init_err(MessageKind::ExitInitializationMode, status, proxy));
            }
        }
        self.read_outputs(None).map_err(as_init)?;
        self.write_inputs(None).map_err(as_init)?;
        Ok(())
    }

    /// Advances every unit by one step, then exchanges coupled values.
    pub fn step_once(&mut self) -> Result<TrajectoryRow, MasterError> {
        let k = self.steps_done;
        let t = self.scenario.time_at(k);
        let h = self.scenario.step_size;
        self.read_outputs(Some((t, h)))?;
        self.write_inputs(Some(k))?;
        self.steps_done += 1;
        Ok(TrajectoryRow {
            step: k,
            time: self.scenario.time_at(k + 1),
            values: self
                .recorded
                .iter()
                .map(|e| self.latest[e.unit_index][&(e.var_type, e.value_reference)].clone())
                .collect(),
        })
    }

    /// Steps to the end of the horizon, then terminates and frees every unit
    /// whether or not the run succeeded.
    pub fn run(&mut self, mode: RunMode) -> Result<RunOutcome, MasterError> {
        let result = self.run_steps(mode);
        self.shutdown();
        result
    }

    fn run_steps(&mut self, mode: RunMode) -> Result<RunOutcome, MasterError> {
        let n = self.scenario.step_count();
        let h = self.scenario.step_size;
        let mut trajectory = Trajectory {
            columns: self.recorded_columns(),
            rows: Vec::with_capacity(n as usize),
        };
        let cpu_start = process_cpu_seconds();
        let mut pacer = Pacer::start(mode, h);
        while self.steps_done < n {
            let k = self.steps_done;
            if self.options.interrupted() {
                return Err(MasterError::Interrupted { step: k });
            }
            trajectory.rows.push(self.step_once()?);
            let record = pacer.finish_step(k);
            if record.overrun {
                log::debug!("step {k} overran its {h} s slot ({:.6} s)", record.wall_duration);
            }
        }
        let records = pacer.into_records();
        let mut report = finalize_report(&records, h, mode).expect("horizon has at least one step");
        report.cpu_seconds = match (cpu_start, process_cpu_seconds()) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        };
        info!(
            "run finished: {} steps, total {:.6} s, AS_t {:.6} s, {} overruns",
            report.steps, report.total_wall, report.average_step_time, report.overrun_count
        );
        Ok(RunOutcome {
            trajectory,
            records,
            report,
        })
    }

    /// TERMINATE where legal, then free every unit. Idempotent.
    pub fn shutdown(&mut self) {
        if self.shut_down {
            return;
        }
        self.shut_down = true;
        for proxy in &mut self.proxies {
            if proxy.state() == InstanceState::StepMode {
                let status = proxy.terminate();
                if !status.is_success() {
                    warn!("unit {}: TERMINATE returned {status}", proxy.unit_name());
                }
            }
            proxy.free();
        }
    }

    /// DO_STEP (when `step` is given) followed by the GETs of each unit.
    fn read_outputs(&mut self, step: Option<(f64, f64)>) -> Result<(), MasterError> {
        let plans = &self.plans;
        let k = self.steps_done;
        let results = for_each_unit(&mut self.proxies, self.options.parallel, |i, proxy| {
            if let Some((t, h)) = step {
                let status = proxy.do_step(t, h);
                if !status.is_success() {
                    return Err((MessageKind::DoStep, status));
                }
            }
            let mut values = HashMap::new();
            for (var_type, vrs) in &plans[i].reads {
                let got = proxy
                    .get(*var_type, vrs)
                    .map_err(|status| (MessageKind::get_for(*var_type), status))?;
                for (vr, v) in vrs.iter().zip(got.iter()) {
                    values.insert((*var_type, *vr), v);
                }
            }
            Ok(values)
        });
        for (i, result) in results.into_iter().enumerate() {
            match result {
                Ok(values) => self.latest[i] = values,
                Err((call, status)) => return Err(self.step_error(i, k, call, status)),
            }
        }
        Ok(())
    }

    fn write_inputs(&mut self, step: Option<u64>) -> Result<(), MasterError> {
        let mut batches: Vec<Vec<(Vec<u32>, Values)>> = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let mut by_type: Vec<(VariableType, Vec<u32>, Vec<&ScalarValue>)> = Vec::new();
            for (var_type, target_vr, src_unit, src_vr) in &plan.feeds {
                let value = &self.latest[*src_unit][&(*var_type, *src_vr)];
                match by_type.iter_mut().find(|(t, _, _)| t == var_type) {
                    Some((_, vrs, vals)) => {
                        vrs.push(*target_vr);
                        vals.push(value);
                    }
                    None => by_type.push((*var_type, vec![*target_vr], vec![value])),
                }
            }
            batches.push(
                by_type
                    .into_iter()
                    .map(|(t, vrs, vals)| (vrs, Values::from_scalars(t, vals).expect("types checked at load")))
                    .collect(),
            );
        }
        let k = step.unwrap_or(self.steps_done);
        let results = for_each_unit(&mut self.proxies, self.options.parallel, |i, proxy| {
            for (vrs, values) in &batches[i] {
                let kind = MessageKind::set_for(values.var_type());
                let status = proxy.set(vrs.clone(), values.clone());
                if !status.is_success() {
                    return Err((kind, status));
                }
            }
            Ok(())
        });
        for (i, result) in results.into_iter().enumerate() {
            if let Err((call, status)) = result {
                return Err(self.step_error(i, k, call, status));
            }
        }
        Ok(())
    }

    fn step_error(&self, unit: usize, step: u64, call: MessageKind, status: Status) -> MasterError {
        MasterError::Step {
            unit: self.proxies[unit].unit_name().to_owned(),
            step,
            call,
            status,
            detail: self.proxies[unit].last_error().map(str::to_owned),
        }
    }
}

impl Drop for CoSimSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn as_init(e: MasterError) -> MasterError {
    match e {
        MasterError::Step {
            unit,
            call,
            status,
            detail,
            ..
        } => MasterError::Init {
            unit,
            call,
            status,
            detail,
        },
        other => other,
    }
}

/// Sends the descriptor start values of one causality, grouped by type.
/// Yields the first failing call, if any.
fn set_starts(
    proxy: &mut ProxyInstance,
    descriptor: &ModelDescriptor,
    causality: Causality,
) -> Option<(MessageKind, Status)> {
    for var_type in VariableType::ALL {
        let vars: Vec<_> = descriptor
            .variables
            .iter()
            .filter(|v| v.causality == causality && v.var_type == var_type && v.start.is_some())
            .collect();
        if vars.is_empty() {
            continue;
        }
        let vrs = vars.iter().map(|v| v.value_reference).collect();
        let values = Values::from_scalars(var_type, vars.iter().filter_map(|v| v.start.as_ref()))
            .expect("start values match their declared type");
        let status = proxy.set(vrs, values);
        if !status.is_success() {
            return Some((MessageKind::set_for(var_type), status));
        }
    }
    None
}

fn build_plans(scenario: &ScenarioConfig) -> (Vec<UnitPlan>, Vec<ResolvedEndpoint>) {
    // Every output of every unit, then captured extras, grouped by unit.
    let mut recorded: Vec<ResolvedEndpoint> = Vec::new();
    for (unit_index, unit) in scenario.units.iter().enumerate() {
        for v in unit.descriptor.outputs() {
            recorded.push(ResolvedEndpoint {
                unit_index,
                endpoint: Endpoint {
                    unit: unit.unit_name.clone(),
                    variable: v.name.clone(),
                },
                value_reference: v.value_reference,
                var_type: v.var_type,
            });
        }
    }
    for e in &scenario.capture {
        if !recorded.contains(e) {
            recorded.push(e.clone());
        }
    }
    recorded.sort_by_key(|e| e.unit_index);

    let mut plans: Vec<UnitPlan> = (0..scenario.units.len())
        .map(|_| UnitPlan {
            reads: Vec::new(),
            feeds: Vec::new(),
        })
        .collect();
    for e in &recorded {
        let reads = &mut plans[e.unit_index].reads;
        match reads.iter_mut().find(|(t, _)| *t == e.var_type) {
            Some((_, vrs)) => vrs.push(e.value_reference),
            None => reads.push((e.var_type, vec![e.value_reference])),
        }
    }
    for c in &scenario.connections {
        plans[c.target.unit_index].feeds.push((
            c.target.var_type,
            c.target.value_reference,
            c.source.unit_index,
            c.source.value_reference,
        ));
    }
    (plans, recorded)
}

fn for_each_unit<T, F>(proxies: &mut [ProxyInstance], parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ProxyInstance) -> T + Sync,
{
    if !parallel || proxies.len() < 2 {
        return proxies.iter_mut().enumerate().map(|(i, p)| f(i, p)).collect();
    }
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = proxies
            .iter_mut()
            .enumerate()
            .map(|(i, p)| s.spawn(move || f(i, p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("unit call thread panicked"))
            .collect()
    })
}

/// Binds, hands the listening addresses to `launch` (which starts the
/// backends), accepts them, initializes and runs to the end of the horizon.
pub fn run_scenario(
    scenario: ScenarioConfig,
    options: MasterOptions,
    mode: RunMode,
    launch: impl FnOnce(&[SocketAddr]),
) -> Result<RunOutcome, MasterError> {
    let mut session = CoSimSession::bind(scenario, options)?;
    launch(&session.local_addrs());
    session.accept_all()?;
    session.initialize()?;
    session.run(mode)
}

/// The three-unit controller / motor / generator bench. `base_port` 0 picks
/// ephemeral ports; otherwise the units listen on consecutive ports.
pub fn bench_scenario(base_port: u16, step_size: f64, end_time: f64, real_time: bool) -> ScenarioConfig {
    let descriptors: HashMap<String, ModelDescriptor> = ["controller", "motor", "generator"]
        .into_iter()
        .map(|name| (name.to_owned(), builtin_descriptor(name).expect("built-in")))
        .collect();
    let mut scenario = parse_scenario(include_str!("../fixtures/demo2_scenario.json"), &descriptors)
        .expect("bench scenario is valid");
    for (i, unit) in scenario.units.iter_mut().enumerate() {
        unit.listen_address = if base_port == 0 {
            "127.0.0.1:0".to_owned()
        } else {
            format!("127.0.0.1:{}", base_port as usize + i)
        };
    }
    scenario.step_size = step_size;
    scenario.end_time = end_time;
    scenario.real_time = real_time;
    scenario
}

/// Parameters of the scripted adder loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdderLoop {
    pub iterations: u64,
    pub step_size: f64,
    pub mode: RunMode,
}

/// Drives an accepted adder proxy: per iteration SET_REAL a = 1, b = 2,
/// DO_STEP, GET_REAL c and check it equals 3. Terminates the instance at
/// the end; freeing is left to the caller.
pub fn run_adder_loop(
    proxy: &mut ProxyInstance,
    cfg: &AdderLoop,
    interrupt: Option<&AtomicBool>,
) -> Result<(Vec<TimingRecord>, TimingReport), MasterError> {
    let unit = proxy.unit_name().to_owned();
    let vr = |name: &str| -> Result<u32, MasterError> {
        proxy
            .descriptor()
            .variable(name)
            .filter(|v| v.var_type == VariableType::Real)
            .map(|v| v.value_reference)
            .ok_or_else(|| MasterError::Check {
                unit: unit.clone(),
                step: 0,
                detail: format!("descriptor has no Real variable {name}"),
            })
    };
    let (a, b, c) = (vr("real_a")?, vr("real_b")?, vr("real_c")?);
    let init_err = |call, status, proxy: &ProxyInstance| MasterError::Init {
        unit: unit.clone(),
        call,
        status,
        detail: proxy.last_error().map(str::to_owned),
    };
    let end = cfg.iterations as f64 * cfg.step_size;
    let status = proxy.setup_experiment(0.0, Some(end), None);
    if !status.is_success() {
        return Err(init_err(MessageKind::SetupExperiment, status, proxy));
    }
    let status = proxy.enter_initialization_mode();
    if !status.is_success() {
        return Err(init_err(MessageKind::EnterInitializationMode, status, proxy));
    }
    let status = proxy.exit_initialization_mode();
    if !status.is_success() {
        return Err(init_err(MessageKind::ExitInitializationMode, status, proxy));
    }

    let cpu_start = process_cpu_seconds();
    let mut pacer = Pacer::start(cfg.mode, cfg.step_size);
    for k in 0..cfg.iterations {
        if interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
            return Err(MasterError::Interrupted { step: k });
        }
        let step_err = |call, status, proxy: &ProxyInstance| MasterError::Step {
            unit: unit.clone(),
            step: k,
            call,
            status,
            detail: proxy.last_error().map(str::to_owned),
        };
        let status = proxy.set_real(&[a, b], &[1.0, 2.0]);
        if !status.is_success() {
            return Err(step_err(MessageKind::SetReal, status, proxy));
        }
        let status = proxy.do_step(k as f64 * cfg.step_size, cfg.step_size);
        if !status.is_success() {
            return Err(step_err(MessageKind::DoStep, status, proxy));
        }
        let sum = proxy
            .get_real(&[c])
            .map_err(|status| step_err(MessageKind::GetReal, status, proxy))?;
        if sum != [3.0] {
            return Err(MasterError::Check {
                unit: unit.clone(),
                step: k,
                detail: format!("real_c = {sum:?}, expected [3.0]"),
            });
        }
        pacer.finish_step(k);
    }
    let status = proxy.terminate();
    if !status.is_success() {
        warn!("unit {unit}: TERMINATE returned {status}");
    }
    let records = pacer.into_records();
    let mut report = finalize_report(&records, cfg.step_size, cfg.mode).map_err(|e| MasterError::Check {
        unit: unit.clone(),
        step: 0,
        detail: e.to_string(),
    })?;
    report.cpu_seconds = match (cpu_start, process_cpu_seconds()) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    Ok((records, report))
}
