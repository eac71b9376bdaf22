use std::collections::HashMap;

use crate::descriptor::{Causality, ModelDescriptor, ScalarValue, VariableType};
use crate::wire::{Status, Values};

/// Variable values of one model, addressed by `(type, value_reference)` and
/// initialized from the descriptor's start values (zero when absent).
#[derive(Debug, Clone)]
pub struct VariableStore {
    descriptor: ModelDescriptor,
    values: HashMap<(VariableType, u32), ScalarValue>,
}

impl VariableStore {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        let values = descriptor
            .variables
            .iter()
            .map(|v| {
                let start = v.start.clone().unwrap_or_else(|| ScalarValue::zero(v.var_type));
                ((v.var_type, v.value_reference), start)
            })
            .collect();
        VariableStore { descriptor, values }
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    /// Writes inputs and parameters; outputs and unknown references are refused
    /// as a whole, leaving the store untouched.
    pub fn set(&mut self, vrs: &[u32], values: &Values) -> Status {
        if vrs.len() != values.len() {
            return Status::Error;
        }
        let var_type = values.var_type();
        let writable = vrs.iter().all(|vr| {
            self.descriptor
                .variable_by_ref(var_type, *vr)
                .is_some_and(|v| v.causality != Causality::Output)
        });
        if !writable {
            return Status::Error;
        }
        for (vr, value) in vrs.iter().zip(values.iter()) {
            self.values.insert((var_type, *vr), value);
        }
        Status::Ok
    }

    pub fn get(&self, var_type: VariableType, vrs: &[u32]) -> Result<Values, Status> {
        let scalars: Vec<&ScalarValue> = vrs
            .iter()
            .map(|vr| self.values.get(&(var_type, *vr)).ok_or(Status::Error))
            .collect::<Result<_, _>>()?;
        Values::from_scalars(var_type, scalars).ok_or(Status::Error)
    }

    pub fn scalar(&self, var_type: VariableType, vr: u32) -> Option<&ScalarValue> {
        self.values.get(&(var_type, vr))
    }

    /// Real value by variable name. Panics if the model's own descriptor lacks it.
    pub fn real(&self, name: &str) -> f64 {
        match self.by_name(name) {
            ScalarValue::Real(v) => *v,
            other => panic!("{name} is not Real: {other:?}"),
        }
    }

    pub fn integer(&self, name: &str) -> i32 {
        match self.by_name(name) {
            ScalarValue::Integer(v) => *v,
            other => panic!("{name} is not Integer: {other:?}"),
        }
    }

    pub fn boolean(&self, name: &str) -> bool {
        match self.by_name(name) {
            ScalarValue::Boolean(v) => *v,
            other => panic!("{name} is not Boolean: {other:?}"),
        }
    }

    pub fn text(&self, name: &str) -> &str {
        match self.by_name(name) {
            ScalarValue::Text(v) => v,
            other => panic!("{name} is not Text: {other:?}"),
        }
    }

    /// Model-internal write, bypassing causality (used for outputs).
    pub fn put(&mut self, name: &str, value: ScalarValue) {
        let var = self
            .descriptor
            .variable(name)
            .unwrap_or_else(|| panic!("no variable {name}"));
        assert_eq!(var.var_type, value.var_type(), "{name}");
        self.values.insert((var.var_type, var.value_reference), value);
    }

    fn by_name(&self, name: &str) -> &ScalarValue {
        let var = self
            .descriptor
            .variable(name)
            .unwrap_or_else(|| panic!("no variable {name}"));
        &self.values[&(var.var_type, var.value_reference)]
    }

    /// Snapshot of every input, for checking that stepping leaves them alone.
    pub fn inputs(&self) -> Vec<ScalarValue> {
        self.descriptor
            .variables
            .iter()
            .filter(|v| v.causality == Causality::Input)
            .map(|v| self.values[&(v.var_type, v.value_reference)].clone())
            .collect()
    }
}
