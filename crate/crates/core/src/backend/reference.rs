//! Single-process replay of the three-unit bench.
//!
//! Executes the same fixed-step Jacobi schedule as the distributed master
//! (one initial propagation, then step all units, then exchange) with the
//! same expressions in the same order, but on plain local variables. A
//! distributed run over loopback must reproduce it bit for bit.

use crate::descriptor::step_count;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub step: u64,
    /// Communication point at the end of the step.
    pub time: f64,
    pub tau_cmd: f64,
    pub tau_mot: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceParams {
    pub omega_ref: f64,
    pub kp: f64,
    pub ki: f64,
    pub tau_max: f64,
    pub motor_time_constant: f64,
    pub inertia: f64,
    pub friction: f64,
    pub load: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        ReferenceParams {
            omega_ref: 10.0,
            kp: 5.0,
            ki: 1.0,
            tau_max: 500.0,
            motor_time_constant: 0.5,
            inertia: 10.0,
            friction: 0.5,
            load: 0.5,
        }
    }
}

/// Reference trajectory with the default bench parameters, starting at t = 0.
pub fn run_reference_simulation(h: f64, end_time: f64) -> Vec<ReferenceRow> {
    run_reference_simulation_with(&ReferenceParams::default(), 0.0, h, end_time)
}

pub fn run_reference_simulation_with(
    p: &ReferenceParams,
    start_time: f64,
    h: f64,
    end_time: f64,
) -> Vec<ReferenceRow> {
    assert!(h > 0.0, "step size must be positive");
    let n = step_count(start_time, end_time, h);

    // Unit states (outputs) at their initial values.
    let mut integral_e = 0.0_f64;
    let mut tau_cmd = 0.0_f64;
    let mut tau_mot = 0.0_f64;
    let mut omega = 0.0_f64;

    // Initial propagation: every connected input takes its source's initial output.
    let mut omega_meas = omega;
    let mut tau_cmd_in = tau_cmd;
    let mut tau_in = tau_mot;

    let mut rows = Vec::with_capacity(n as usize);
    for k in 0..n {
        let e = p.omega_ref - omega_meas;
        integral_e += e * h;
        tau_cmd = (p.kp * e + p.ki * integral_e).clamp(-p.tau_max, p.tau_max);

        tau_mot = tau_mot + h * (tau_cmd_in - tau_mot) / p.motor_time_constant;

        omega = omega + h * (tau_in - (p.friction + p.load) * omega) / p.inertia;

        tau_cmd_in = tau_cmd;
        tau_in = tau_mot;
        omega_meas = omega;

        rows.push(ReferenceRow {
            step: k,
            time: start_time + (k + 1) as f64 * h,
            tau_cmd,
            tau_mot,
            omega,
        });
    }
    rows
}
