//! Stand-in dynamics for the three-unit test bench: a PI speed controller,
//! a first-order torque lag for the motor, and a rotating inertia with
//! speed-proportional losses for the generator. All three advance by one
//! explicit Euler update per communication step.
//!
//! With the default parameters the closed loop settles at
//! `omega = 10 rad/s`, `tau = 10 N·m`.

use crate::descriptor::{ModelDescriptor, ScalarValue, VariableType};
use crate::wire::{Status, Values};

use super::{Model, VariableStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    /// rad/s
    pub omega_ref: f64,
    /// N·m·s/rad
    pub kp: f64,
    /// N·m/rad
    pub ki: f64,
    /// N·m
    pub tau_max: f64,
}

pub const DEFAULT_CONTROLLER: ControllerParams = ControllerParams {
    omega_ref: 10.0,
    kp: 5.0,
    ki: 1.0,
    tau_max: 500.0,
};

/// Seconds.
pub const DEFAULT_MOTOR_TIME_CONSTANT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// kg·m²
    pub inertia: f64,
    /// N·m·s/rad
    pub friction: f64,
    /// N·m·s/rad
    pub load: f64,
}

pub const DEFAULT_GENERATOR: GeneratorParams = GeneratorParams {
    inertia: 10.0,
    friction: 0.5,
    load: 0.5,
};

/// Advances the integrator and returns the saturated torque command.
pub fn controller_update(p: &ControllerParams, integral_e: &mut f64, omega_meas: f64, h: f64) -> f64 {
    let e = p.omega_ref - omega_meas;
    *integral_e += e * h;
    (p.kp * e + p.ki * *integral_e).clamp(-p.tau_max, p.tau_max)
}

pub fn motor_update(time_constant: f64, tau_mot: f64, tau_cmd_in: f64, h: f64) -> f64 {
    tau_mot + h * (tau_cmd_in - tau_mot) / time_constant
}

pub fn generator_update(p: &GeneratorParams, omega: f64, tau_in: f64, h: f64) -> f64 {
    omega + h * (tau_in - (p.friction + p.load) * omega) / p.inertia
}

macro_rules! store_backed_model {
    ($ty:ident) => {
        impl Model for $ty {
            fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
                self.store.set(vrs, values)
            }

            fn get(&mut self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
                self.store.get(var_type, vrs)
            }

            fn do_step(&mut self, _current_time: f64, step_size: f64) -> Status {
                if !(step_size > 0.0) {
                    return Status::Error;
                }
                self.step(step_size)
            }
        }
    };
}

#[derive(Debug, Clone)]
pub struct ControllerModel {
    store: VariableStore,
    integral_e: f64,
}

impl ControllerModel {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        ControllerModel {
            store: VariableStore::new(descriptor),
            integral_e: 0.0,
        }
    }

    pub fn params(&self) -> ControllerParams {
        ControllerParams {
            omega_ref: self.store.real("omega_ref"),
            kp: self.store.real("kp"),
            ki: self.store.real("ki"),
            tau_max: self.store.real("tau_max"),
        }
    }

    pub fn integral_error(&self) -> f64 {
        self.integral_e
    }

    pub fn store(&self) -> &VariableStore {
        &self.store
    }

    fn step(&mut self, h: f64) -> Status {
        let p = self.params();
        if !(p.tau_max >= 0.0) {
            return Status::Error;
        }
        let tau = controller_update(&p, &mut self.integral_e, self.store.real("omega_meas"), h);
        self.store.put("tau_cmd", ScalarValue::Real(tau));
        Status::Ok
    }
}

store_backed_model!(ControllerModel);

#[derive(Debug, Clone)]
pub struct MotorModel {
    store: VariableStore,
}

impl MotorModel {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        MotorModel {
            store: VariableStore::new(descriptor),
        }
    }

    pub fn store(&self) -> &VariableStore {
        &self.store
    }

    fn step(&mut self, h: f64) -> Status {
        let time_constant = self.store.real("time_constant");
        if !(time_constant > 0.0) {
            return Status::Error;
        }
        let tau = motor_update(
            time_constant,
            self.store.real("tau_mot"),
            self.store.real("tau_cmd_in"),
            h,
        );
        self.store.put("tau_mot", ScalarValue::Real(tau));
        Status::Ok
    }
}

store_backed_model!(MotorModel);

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    store: VariableStore,
}

impl GeneratorModel {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        GeneratorModel {
            store: VariableStore::new(descriptor),
        }
    }

    pub fn params(&self) -> GeneratorParams {
        GeneratorParams {
            inertia: self.store.real("inertia"),
            friction: self.store.real("friction"),
            load: self.store.real("load"),
        }
    }

    pub fn store(&self) -> &VariableStore {
        &self.store
    }

    fn step(&mut self, h: f64) -> Status {
        let p = self.params();
        if !(p.inertia > 0.0) {
            return Status::Error;
        }
        let omega = generator_update(&p, self.store.real("omega"), self.store.real("tau_in"), h);
        self.store.put("omega", ScalarValue::Real(omega));
        Status::Ok
    }
}

store_backed_model!(GeneratorModel);
