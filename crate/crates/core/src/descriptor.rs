//! Model descriptors and co-simulation scenario files.
//!
//! A [`ModelDescriptor`] lists the scalar variables of one simulation unit. It
//! is the contract shared by the master, the proxy standing in for the unit,
//! and the backend that actually runs the model. A [`ScenarioConfig`] wires a
//! set of units together and carries the run parameters.
//!
//! Both documents are JSON. Parsing walks the raw [`serde_json::Value`] tree
//! so that every rejection can name the offending field path
//! (`variables[3].type`, `connections[0].source`, ...).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

/// Scalar kinds a variable can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariableType {
    Real,
    Integer,
    Boolean,
    Text,
}

impl VariableType {
    pub const ALL: [VariableType; 4] = [
        VariableType::Real,
        VariableType::Integer,
        VariableType::Boolean,
        VariableType::Text,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            VariableType::Real => "Real",
            VariableType::Integer => "Integer",
            VariableType::Boolean => "Boolean",
            VariableType::Text => "Text",
        }
    }

    fn from_keyword(s: &str) -> Option<Self> {
        VariableType::ALL.into_iter().find(|t| t.keyword() == s)
    }
}

impl fmt::Display for VariableType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Causality {
    Input,
    Output,
    Parameter,
}

impl Causality {
    pub fn keyword(self) -> &'static str {
        match self {
            Causality::Input => "input",
            Causality::Output => "output",
            Causality::Parameter => "parameter",
        }
    }

    fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "input" => Some(Causality::Input),
            "output" => Some(Causality::Output),
            "parameter" => Some(Causality::Parameter),
            _ => None,
        }
    }
}

impl fmt::Display for Causality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// A single value of one of the four scalar kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarValue {
    Real(f64),
    Integer(i32),
    Boolean(bool),
    Text(String),
}

impl ScalarValue {
    pub fn var_type(&self) -> VariableType {
        match self {
            ScalarValue::Real(_) => VariableType::Real,
            ScalarValue::Integer(_) => VariableType::Integer,
            ScalarValue::Boolean(_) => VariableType::Boolean,
            ScalarValue::Text(_) => VariableType::Text,
        }
    }

    /// The zero value of a kind: `0.0`, `0`, `false`, `""`.
    pub fn zero(var_type: VariableType) -> Self {
        match var_type {
            VariableType::Real => ScalarValue::Real(0.0),
            VariableType::Integer => ScalarValue::Integer(0),
            VariableType::Boolean => ScalarValue::Boolean(false),
            VariableType::Text => ScalarValue::Text(String::new()),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            ScalarValue::Real(v) => Value::from(*v),
            ScalarValue::Integer(v) => Value::from(*v),
            ScalarValue::Boolean(v) => Value::from(*v),
            ScalarValue::Text(v) => Value::from(v.as_str()),
        }
    }

    fn from_json(var_type: VariableType, value: &Value) -> Option<Self> {
        match var_type {
            VariableType::Real => value.as_f64().filter(|v| v.is_finite()).map(ScalarValue::Real),
            VariableType::Integer => value
                .as_i64()
                .and_then(|v| i32::try_from(v).ok())
                .map(ScalarValue::Integer),
            VariableType::Boolean => value.as_bool().map(ScalarValue::Boolean),
            VariableType::Text => value.as_str().map(|s| ScalarValue::Text(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVariable {
    pub name: String,
    pub value_reference: u32,
    pub var_type: VariableType,
    pub causality: Causality,
    pub start: Option<ScalarValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub model_name: String,
    pub instance_guid: String,
    pub variables: Vec<ScalarVariable>,
}

impl ModelDescriptor {
    pub fn variable(&self, name: &str) -> Option<&ScalarVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn variable_by_ref(&self, var_type: VariableType, vr: u32) -> Option<&ScalarVariable> {
        self.variables
            .iter()
            .find(|v| v.var_type == var_type && v.value_reference == vr)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &ScalarVariable> {
        self.variables
            .iter()
            .filter(|v| v.causality == Causality::Output)
    }

    /// Serializes back into the descriptor JSON schema.
    pub fn to_json(&self) -> String {
        let variables: Vec<Value> = self
            .variables
            .iter()
            .map(|v| {
                let mut obj = Map::new();
                obj.insert("name".into(), Value::from(v.name.as_str()));
                obj.insert("value_reference".into(), Value::from(v.value_reference));
                obj.insert("type".into(), Value::from(v.var_type.keyword()));
                obj.insert("causality".into(), Value::from(v.causality.keyword()));
                if let Some(start) = &v.start {
                    obj.insert("start".into(), start.to_json());
                }
                Value::Object(obj)
            })
            .collect();
        let mut root = Map::new();
        root.insert("model_name".into(), Value::from(self.model_name.as_str()));
        root.insert(
            "instance_guid".into(),
            Value::from(self.instance_guid.as_str()),
        );
        root.insert("variables".into(), Value::Array(variables));
        serde_json::to_string_pretty(&Value::Object(root)).expect("descriptor serializes")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("{path}: unknown keyword {keyword:?}")]
    UnknownKeyword { path: String, keyword: String },
    #[error("{path}: empty variable list")]
    EmptyVariables { path: String },
    #[error("{path}: duplicate variable name {name:?} (first declared at {first})")]
    DuplicateName {
        path: String,
        name: String,
        first: String,
    },
    #[error(
        "{path}: duplicate {var_type} value reference {value_reference} shared by {first:?} and {second:?}"
    )]
    DuplicateReference {
        path: String,
        var_type: VariableType,
        value_reference: u32,
        first: String,
        second: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: dangling connection endpoint {endpoint:?}")]
    DanglingEndpoint { path: String, endpoint: String },
    #[error("{path}: causality mismatch, {endpoint} is {found} but must be {expected}")]
    CausalityMismatch {
        path: String,
        endpoint: String,
        found: Causality,
        expected: Causality,
    },
    #[error("{path}: type mismatch, {source_type} cannot feed {target_type}")]
    TypeMismatch {
        path: String,
        source_type: VariableType,
        target_type: VariableType,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: IoError,
    },
}

/// `std::io::Error` is not `PartialEq`; this keeps its message for comparisons.
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct IoError(pub String);

impl DescriptorError {
    /// Field path of the offending element.
    pub fn path(&self) -> &str {
        match self {
            DescriptorError::Malformed { path, .. }
            | DescriptorError::UnknownKeyword { path, .. }
            | DescriptorError::EmptyVariables { path }
            | DescriptorError::DuplicateName { path, .. }
            | DescriptorError::DuplicateReference { path, .. }
            | DescriptorError::Invalid { path, .. }
            | DescriptorError::DanglingEndpoint { path, .. }
            | DescriptorError::CausalityMismatch { path, .. }
            | DescriptorError::TypeMismatch { path, .. }
            | DescriptorError::Io { path, .. } => path,
        }
    }
}

fn malformed(path: impl Into<String>, message: impl Into<String>) -> DescriptorError {
    DescriptorError::Malformed {
        path: path.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value, DescriptorError> {
    obj.get(key)
        .ok_or_else(|| malformed(join(path, key), "missing required key"))
}

fn str_field<'a>(
    obj: &'a Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<&'a str, DescriptorError> {
    field(obj, path, key)?
        .as_str()
        .ok_or_else(|| malformed(join(path, key), "expected a string"))
}

fn f64_field(obj: &Map<String, Value>, path: &str, key: &str) -> Result<f64, DescriptorError> {
    field(obj, path, key)?
        .as_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(join(path, key), "expected a finite number"))
}

fn object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, DescriptorError> {
    value
        .as_object()
        .ok_or_else(|| malformed(path_or_root(path), "expected an object"))
}

fn array<'a>(value: &'a Value, path: &str) -> Result<&'a Vec<Value>, DescriptorError> {
    value
        .as_array()
        .ok_or_else(|| malformed(path, "expected an array"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    }
}

fn path_or_root(path: &str) -> String {
    if path.is_empty() {
        "$".to_owned()
    } else {
        path.to_owned()
    }
}

fn parse_json(text: &str) -> Result<Value, DescriptorError> {
    serde_json::from_str(text).map_err(|e| malformed("$", e.to_string()))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses and validates a descriptor document.
pub fn parse_descriptor(text: &str) -> Result<ModelDescriptor, DescriptorError> {
    let root = parse_json(text)?;
    let obj = object(&root, "")?;
    let model_name = str_field(obj, "", "model_name")?;
    if !is_identifier(model_name) {
        return Err(DescriptorError::Invalid {
            path: "model_name".into(),
            message: format!("{model_name:?} is not an identifier"),
        });
    }
    let instance_guid = str_field(obj, "", "instance_guid")?;
    let raw_vars = array(field(obj, "", "variables")?, "variables")?;
    if raw_vars.is_empty() {
        return Err(DescriptorError::EmptyVariables {
            path: "variables".into(),
        });
    }

    let mut variables = Vec::with_capacity(raw_vars.len());
    let mut names: HashMap<String, String> = HashMap::new();
    let mut refs: HashMap<(VariableType, u32), String> = HashMap::new();
    for (i, raw) in raw_vars.iter().enumerate() {
        let path = format!("variables[{i}]");
        let var = parse_variable(raw, &path)?;
        if let Some(first) = names.get(&var.name) {
            return Err(DescriptorError::DuplicateName {
                path: join(&path, "name"),
                name: var.name,
                first: first.clone(),
            });
        }
        if let Some(first) = refs.get(&(var.var_type, var.value_reference)) {
            return Err(DescriptorError::DuplicateReference {
                path: join(&path, "value_reference"),
                var_type: var.var_type,
                value_reference: var.value_reference,
                first: first.clone(),
                second: var.name,
            });
        }
        names.insert(var.name.clone(), path.clone());
        refs.insert((var.var_type, var.value_reference), var.name.clone());
        variables.push(var);
    }

    Ok(ModelDescriptor {
        model_name: model_name.to_owned(),
        instance_guid: instance_guid.to_owned(),
        variables,
    })
}

fn parse_variable(raw: &Value, path: &str) -> Result<ScalarVariable, DescriptorError> {
    let obj = object(raw, path)?;
    let name = str_field(obj, path, "name")?;
    if !is_identifier(name) {
        return Err(DescriptorError::Invalid {
            path: join(path, "name"),
            message: format!("{name:?} is not an identifier"),
        });
    }
    let value_reference = field(obj, path, "value_reference")?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| malformed(join(path, "value_reference"), "expected an unsigned 32-bit integer"))?;
    let type_kw = str_field(obj, path, "type")?;
    let var_type = VariableType::from_keyword(type_kw).ok_or_else(|| DescriptorError::UnknownKeyword {
        path: join(path, "type"),
        keyword: type_kw.to_owned(),
    })?;
    let causality_kw = str_field(obj, path, "causality")?;
    let causality =
        Causality::from_keyword(causality_kw).ok_or_else(|| DescriptorError::UnknownKeyword {
            path: join(path, "causality"),
            keyword: causality_kw.to_owned(),
        })?;
    let start = match obj.get("start") {
        None | Some(Value::Null) => None,
        Some(v) => Some(ScalarValue::from_json(var_type, v).ok_or_else(|| {
            malformed(join(path, "start"), format!("expected a {var_type} literal"))
        })?),
    };
    Ok(ScalarVariable {
        name: name.to_owned(),
        value_reference,
        var_type,
        causality,
        start,
    })
}

/// `unit.variable` as written in a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub unit: String,
    pub variable: String,
}

impl Endpoint {
    pub fn parse(s: &str) -> Option<Self> {
        let (unit, variable) = s.split_once('.')?;
        if unit.is_empty() || variable.is_empty() || variable.contains('.') {
            return None;
        }
        Some(Endpoint {
            unit: unit.to_owned(),
            variable: variable.to_owned(),
        })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.unit, self.variable)
    }
}

/// An endpoint resolved against the unit's descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedEndpoint {
    pub unit_index: usize,
    pub endpoint: Endpoint,
    pub value_reference: u32,
    pub var_type: VariableType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connection {
    pub source: ResolvedEndpoint,
    pub target: ResolvedEndpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitConfig {
    pub unit_name: String,
    pub descriptor_path: PathBuf,
    pub listen_address: String,
    pub auth_token: String,
    pub descriptor: ModelDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub units: Vec<UnitConfig>,
    pub connections: Vec<Connection>,
    /// Extra variables recorded in the trajectory besides connected outputs.
    pub capture: Vec<ResolvedEndpoint>,
    pub step_size: f64,
    pub start_time: f64,
    pub end_time: f64,
    pub real_time: bool,
    pub output_path: PathBuf,
}

impl ScenarioConfig {
    /// Number of communication steps, rounded once up front.
    pub fn step_count(&self) -> u64 {
        step_count(self.start_time, self.end_time, self.step_size)
    }

    /// Communication point `k`, computed multiplicatively so no drift accumulates.
    pub fn time_at(&self, k: u64) -> f64 {
        self.start_time + k as f64 * self.step_size
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.unit_name == name)
    }
}

pub fn step_count(start_time: f64, end_time: f64, step_size: f64) -> u64 {
    ((end_time - start_time) / step_size).round() as u64
}

/// Parses and cross-validates a scenario. `descriptors` maps unit names to
/// their already-parsed descriptors.
pub fn parse_scenario(
    text: &str,
    descriptors: &HashMap<String, ModelDescriptor>,
) -> Result<ScenarioConfig, DescriptorError> {
    let root = parse_json(text)?;
    let obj = object(&root, "")?;

    let step_size = f64_field(obj, "", "step_size")?;
    if step_size <= 0.0 {
        return Err(DescriptorError::Invalid {
            path: "step_size".into(),
            message: format!("step_size must be > 0, got {step_size}"),
        });
    }
    let start_time = f64_field(obj, "", "start_time")?;
    let end_time = f64_field(obj, "", "end_time")?;
    if end_time <= start_time {
        return Err(DescriptorError::Invalid {
            path: "end_time".into(),
            message: format!("end_time {end_time} must exceed start_time {start_time}"),
        });
    }
    if step_count(start_time, end_time, step_size) == 0 {
        return Err(DescriptorError::Invalid {
            path: "step_size".into(),
            message: "horizon is shorter than half a step".into(),
        });
    }
    let real_time = field(obj, "", "real_time")?
        .as_bool()
        .ok_or_else(|| malformed("real_time", "expected a boolean"))?;
    let output_path = PathBuf::from(str_field(obj, "", "output_path")?);

    let raw_units = array(field(obj, "", "units")?, "units")?;
    if raw_units.is_empty() {
        return Err(DescriptorError::Invalid {
            path: "units".into(),
            message: "at least one unit is required".into(),
        });
    }
    let mut units: Vec<UnitConfig> = Vec::with_capacity(raw_units.len());
    let mut seen_addrs: HashSet<String> = HashSet::new();
    for (i, raw) in raw_units.iter().enumerate() {
        let path = format!("units[{i}]");
        let uobj = object(raw, &path)?;
        let unit_name = str_field(uobj, &path, "unit_name")?;
        if !is_identifier(unit_name) {
            return Err(DescriptorError::Invalid {
                path: join(&path, "unit_name"),
                message: format!("{unit_name:?} is not an identifier"),
            });
        }
        if units.iter().any(|u| u.unit_name == unit_name) {
            return Err(DescriptorError::Invalid {
                path: join(&path, "unit_name"),
                message: format!("duplicate unit name {unit_name:?}"),
            });
        }
        let listen = str_field(uobj, &path, "listen")?;
        let addr: SocketAddr = listen.parse().map_err(|_| DescriptorError::Invalid {
            path: join(&path, "listen"),
            message: format!("{listen:?} is not a host:port socket address"),
        })?;
        // Port 0 asks the OS for an ephemeral port, which is unique by construction.
        if addr.port() != 0 && !seen_addrs.insert(addr.to_string()) {
            return Err(DescriptorError::Invalid {
                path: join(&path, "listen"),
                message: format!("duplicate listen address {listen}"),
            });
        }
        let token = str_field(uobj, &path, "token")?;
        let descriptor_path = PathBuf::from(str_field(uobj, &path, "descriptor")?);
        let descriptor = descriptors
            .get(unit_name)
            .cloned()
            .ok_or_else(|| DescriptorError::Invalid {
                path: join(&path, "descriptor"),
                message: format!("no descriptor loaded for unit {unit_name:?}"),
            })?;
        units.push(UnitConfig {
            unit_name: unit_name.to_owned(),
            descriptor_path,
            listen_address: listen.to_owned(),
            auth_token: token.to_owned(),
            descriptor,
        });
    }

    let raw_conns = array(field(obj, "", "connections")?, "connections")?;
    let mut connections = Vec::with_capacity(raw_conns.len());
    for (i, raw) in raw_conns.iter().enumerate() {
        let path = format!("connections[{i}]");
        let cobj = object(raw, &path)?;
        let source = resolve(&units, str_field(cobj, &path, "source")?, &join(&path, "source"))?;
        let target = resolve(&units, str_field(cobj, &path, "target")?, &join(&path, "target"))?;
        let source_causality = causality_of(&units, &source);
        if source_causality != Causality::Output {
            return Err(DescriptorError::CausalityMismatch {
                path: join(&path, "source"),
                endpoint: source.endpoint.to_string(),
                found: source_causality,
                expected: Causality::Output,
            });
        }
        let target_causality = causality_of(&units, &target);
        if target_causality != Causality::Input {
            return Err(DescriptorError::CausalityMismatch {
                path: join(&path, "target"),
                endpoint: target.endpoint.to_string(),
                found: target_causality,
                expected: Causality::Input,
            });
        }
        if source.var_type != target.var_type {
            return Err(DescriptorError::TypeMismatch {
                path: path.clone(),
                source_type: source.var_type,
                target_type: target.var_type,
            });
        }
        connections.push(Connection { source, target });
    }

    let mut capture = Vec::new();
    if let Some(raw) = obj.get("capture") {
        for (i, item) in array(raw, "capture")?.iter().enumerate() {
            let path = format!("capture[{i}]");
            let s = item
                .as_str()
                .ok_or_else(|| malformed(path.clone(), "expected a string"))?;
            capture.push(resolve(&units, s, &path)?);
        }
    }

    Ok(ScenarioConfig {
        units,
        connections,
        capture,
        step_size,
        start_time,
        end_time,
        real_time,
        output_path,
    })
}

fn resolve(units: &[UnitConfig], text: &str, path: &str) -> Result<ResolvedEndpoint, DescriptorError> {
    let dangling = || DescriptorError::DanglingEndpoint {
        path: path.to_owned(),
        endpoint: text.to_owned(),
    };
    let endpoint = Endpoint::parse(text).ok_or_else(dangling)?;
    let unit_index = units
        .iter()
        .position(|u| u.unit_name == endpoint.unit)
        .ok_or_else(dangling)?;
    let var = units[unit_index]
        .descriptor
        .variable(&endpoint.variable)
        .ok_or_else(dangling)?;
    Ok(ResolvedEndpoint {
        unit_index,
        value_reference: var.value_reference,
        var_type: var.var_type,
        endpoint,
    })
}

fn causality_of(units: &[UnitConfig], ep: &ResolvedEndpoint) -> Causality {
    units[ep.unit_index]
        .descriptor
        .variable(&ep.endpoint.variable)
        .map(|v| v.causality)
        .expect("resolved endpoint")
}

/// Reads a scenario file and every descriptor it references. Descriptor paths
/// are taken relative to the scenario file's directory.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, DescriptorError> {
    let text = read(path)?;
    let root = parse_json(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut descriptors = HashMap::new();
    if let Some(units) = root.get("units").and_then(Value::as_array) {
        for (i, unit) in units.iter().enumerate() {
            let (Some(name), Some(desc)) = (
                unit.get("unit_name").and_then(Value::as_str),
                unit.get("descriptor").and_then(Value::as_str),
            ) else {
                continue;
            };
            let desc_path = base.join(desc);
            let desc_text = read(&desc_path)?;
            let descriptor = parse_descriptor(&desc_text).map_err(|e| DescriptorError::Invalid {
                path: format!("units[{i}].descriptor"),
                message: format!("{}: {e}", desc_path.display()),
            })?;
            descriptors.insert(name.to_owned(), descriptor);
        }
    }
    let mut scenario = parse_scenario(&text, &descriptors)?;
    if scenario.output_path.is_relative() {
        scenario.output_path = base.join(&scenario.output_path);
    }
    Ok(scenario)
}

fn read(path: &Path) -> Result<String, DescriptorError> {
    std::fs::read_to_string(path).map_err(|e| DescriptorError::Io {
        path: path.display().to_string(),
        source: IoError(e.to_string()),
    })
}
