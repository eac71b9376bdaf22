use crate::descriptor::{ModelDescriptor, ScalarValue, VariableType};
use crate::wire::{Status, Values};

use super::{Model, VariableStore};

/// Twelve-variable calculator: for each scalar kind, `*_c` is derived from
/// `*_a` and `*_b` on every step.
///
/// | kind    | output                      |
/// |---------|-----------------------------|
/// | Real    | `real_a + real_b`           |
/// | Integer | `integer_a - integer_b`     |
/// | Boolean | `boolean_a && boolean_b`    |
/// | Text    | `string_a ++ string_b`      |
#[derive(Debug, Clone)]
pub struct AdderModel {
    store: VariableStore,
}

impl AdderModel {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        AdderModel {
            store: VariableStore::new(descriptor),
        }
    }

    /// Recomputes all four outputs from the current inputs.
    pub fn step(&mut self) {
        let s = &mut self.store;
        let real = s.real("real_a") + s.real("real_b");
        let integer = s.integer("integer_a").wrapping_sub(s.integer("integer_b"));
        let boolean = s.boolean("boolean_a") && s.boolean("boolean_b");
        let text = format!("{}{}", s.text("string_a"), s.text("string_b"));
        s.put("real_c", ScalarValue::Real(real));
        s.put("integer_c", ScalarValue::Integer(integer));
        s.put("boolean_c", ScalarValue::Boolean(boolean));
        s.put("string_c", ScalarValue::Text(text));
    }

    pub fn store(&self) -> &VariableStore {
        &self.store
    }
}

impl Model for AdderModel {
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
        self.step();
        Status::Ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::builtin_descriptor;
    use proptest::prelude::*;

    fn adder() -> AdderModel {
        AdderModel::new(builtin_descriptor("adder").unwrap())
    }

    fn step_with(values: [Values; 4]) -> AdderModel {
        let mut m = adder();
        for v in values {
            assert_eq!(m.set(&[0, 1], &v), Status::Ok);
        }
        assert_eq!(m.do_step(0.0, 0.01), Status::Ok);
        m
    }

    #[test]
    fn outputs_follow_definitions() {
        let mut m = step_with([
            Values::Real(vec![1.0, 2.0]),
            Values::Integer(vec![5, 7]),
            Values::Boolean(vec![true, false]),
            Values::Text(vec!["foo".into(), "bar".into()]),
        ]);
        assert_eq!(m.get(VariableType::Real, &[2]), Ok(Values::Real(vec![3.0])));
        assert_eq!(m.get(VariableType::Integer, &[2]), Ok(Values::Integer(vec![-2])));
        assert_eq!(m.get(VariableType::Boolean, &[2]), Ok(Values::Boolean(vec![false])));
        assert_eq!(m.get(VariableType::Text, &[2]), Ok(Values::Text(vec!["foobar".into()])));
    }

    #[test]
    fn outputs_only_change_on_step() {
        let mut m = adder();
        m.set(&[0, 1], &Values::Real(vec![1.0, 2.0]));
        assert_eq!(m.get(VariableType::Real, &[2]), Ok(Values::Real(vec![0.0])));
        m.do_step(0.0, 0.01);
        assert_eq!(m.get(VariableType::Real, &[2]), Ok(Values::Real(vec![3.0])));
    }

    #[test]
    fn outputs_and_unknown_refs_are_not_settable() {
        let mut m = adder();
        assert_eq!(m.set(&[2], &Values::Real(vec![9.0])), Status::Error);
        assert_eq!(m.set(&[0, 7], &Values::Real(vec![9.0, 9.0])), Status::Error);
        // A refused batch leaves earlier elements untouched.
        assert_eq!(m.get(VariableType::Real, &[0]), Ok(Values::Real(vec![0.0])));
        assert_eq!(m.get(VariableType::Real, &[3]), Err(Status::Error));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert_eq!(adder().do_step(0.0, 0.0), Status::Error);
    }

    fn arb_set() -> impl Strategy<Value = (u32, Values)> {
        (
            0u32..2,
            prop_oneof![
                any::<f64>().prop_filter("nan", |v| !v.is_nan()).prop_map(|v| Values::Real(vec![v])),
                any::<i32>().prop_map(|v| Values::Integer(vec![v])),
                any::<bool>().prop_map(|v| Values::Boolean(vec![v])),
                ".{0,6}".prop_map(|v| Values::Text(vec![v])),
            ],
        )
    }

    proptest! {
        #[test]
        fn get_returns_last_set(ops in proptest::collection::vec(arb_set(), 1..40)) {
            let mut m = adder();
            let mut last = std::collections::HashMap::new();
            for (vr, values) in &ops {
                prop_assert_eq!(m.set(&[*vr], values), Status::Ok);
                last.insert((values.var_type(), *vr), values.clone());
            }
            for ((ty, vr), values) in last {
                prop_assert_eq!(m.get(ty, &[vr]).unwrap(), values);
            }
        }

        #[test]
        fn step_never_mutates_inputs(ops in proptest::collection::vec(arb_set(), 0..12)) {
            let mut m = adder();
            for (vr, values) in &ops {
                m.set(&[*vr], values);
            }
            let before = m.store().inputs();
            m.do_step(0.0, 0.01);
            prop_assert_eq!(m.store().inputs(), before);
        }

        #[test]
        fn integer_output_is_wrapping_difference(a in any::<i32>(), b in any::<i32>()) {
            let mut m = adder();
            m.set(&[0, 1], &Values::Integer(vec![a, b]));
            m.do_step(0.0, 0.01);
            prop_assert_eq!(m.get(VariableType::Integer, &[2]).unwrap(), Values::Integer(vec![a.wrapping_sub(b)]));
        }
    }
}
