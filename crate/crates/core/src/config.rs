//! Configuration matrix: parsing, serialization and validation.
//!
//! The on-disk format is TOML:
//!
//! ```toml
//! [parameters]
//! dataset = ["digits", "wine", "breast_cancer"]
//! model = ["adaboost", "random_forest", "svc"]
//!
//! [settings]
//! n_fold = 5
//!
//! [[exclude]]
//! dataset = "digits"
//! model = "svc"
//!
//! [runner]
//! command = "python train.py {dataset} {model}"
//! timeout_ms = 60000
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;
use toml::Value;

use crate::engine::template::CommandTemplate;
use crate::expand::{count_tasks, MAX_PLAN_TASKS};

/// A scalar parameter or setting value.
///
/// Values act as labels: the runner maps them to behavior through its
/// command template. Equality compares the type tag first, so integer `1`,
/// string `"1"` and float `1.0` are three different values.
#[derive(Debug, Clone)]
pub enum ParamValue {
    String(String),
    Integer(i64),
    Float(f64),
    Boolean(bool),
    Null,
}

impl ParamValue {
    pub fn tag(&self) -> char {
        match self {
            ParamValue::String(_) => 's',
            ParamValue::Integer(_) => 'i',
            ParamValue::Float(_) => 'f',
            ParamValue::Boolean(_) => 'b',
            ParamValue::Null => 'n',
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::String(_) => "string",
            ParamValue::Integer(_) => "integer",
            ParamValue::Float(_) => "float",
            ParamValue::Boolean(_) => "boolean",
            ParamValue::Null => "null",
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamValue::Float(f) => f.is_finite(),
            _ => true,
        }
    }

    fn from_toml(value: &Value) -> Option<ParamValue> {
        match value {
            Value::String(s) => Some(ParamValue::String(s.clone())),
            Value::Integer(i) => Some(ParamValue::Integer(*i)),
            Value::Float(f) => Some(ParamValue::Float(*f)),
            Value::Boolean(b) => Some(ParamValue::Boolean(*b)),
            Value::Datetime(_) | Value::Array(_) | Value::Table(_) => None,
        }
    }

    fn to_toml(&self) -> Option<Value> {
        match self {
            ParamValue::String(s) => Some(Value::String(s.clone())),
            ParamValue::Integer(i) => Some(Value::Integer(*i)),
            ParamValue::Float(f) => Some(Value::Float(*f)),
            ParamValue::Boolean(b) => Some(Value::Boolean(*b)),
            ParamValue::Null => None,
        }
    }

    pub(crate) fn to_json(&self) -> serde_json::Value {
        match self {
            ParamValue::String(s) => serde_json::Value::String(s.clone()),
            ParamValue::Integer(i) => serde_json::Value::from(*i),
            ParamValue::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            ParamValue::Boolean(b) => serde_json::Value::Bool(*b),
            ParamValue::Null => serde_json::Value::Null,
        }
    }

    pub(crate) fn from_json(value: &serde_json::Value) -> Option<ParamValue> {
        match value {
            serde_json::Value::Null => Some(ParamValue::Null),
            serde_json::Value::Bool(b) => Some(ParamValue::Boolean(*b)),
            serde_json::Value::String(s) => Some(ParamValue::String(s.clone())),
            serde_json::Value::Number(n) => {
                if n.is_f64() {
                    n.as_f64().map(ParamValue::Float)
                } else {
                    n.as_i64().map(ParamValue::Integer)
                }
            }
            _ => None,
        }
    }
}

impl PartialEq for ParamValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ParamValue::String(a), ParamValue::String(b)) => a == b,
            (ParamValue::Integer(a), ParamValue::Integer(b)) => a == b,
            // Bitwise, so that equal values always have equal encodings.
            (ParamValue::Float(a), ParamValue::Float(b)) => a.to_bits() == b.to_bits(),
            (ParamValue::Boolean(a), ParamValue::Boolean(b)) => a == b,
            (ParamValue::Null, ParamValue::Null) => true,
            _ => false,
        }
    }
}

impl Eq for ParamValue {}

impl std::hash::Hash for ParamValue {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.tag().hash(state);
        match self {
            ParamValue::String(s) => s.hash(state),
            ParamValue::Integer(i) => i.hash(state),
            ParamValue::Float(f) => f.to_bits().hash(state),
            ParamValue::Boolean(b) => b.hash(state),
            ParamValue::Null => {}
        }
    }
}

/// Renders the bare scalar: strings unquoted, floats in canonical form,
/// null as the empty string.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::String(s) => f.write_str(s),
            ParamValue::Integer(i) => write!(f, "{i}"),
            ParamValue::Float(x) => f.write_str(&crate::identity::format_float(*x)),
            ParamValue::Boolean(b) => write!(f, "{b}"),
            ParamValue::Null => Ok(()),
        }
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::String(s.to_owned())
    }
}

impl From<String> for ParamValue {
    fn from(s: String) -> Self {
        ParamValue::String(s)
    }
}

impl From<i64> for ParamValue {
    fn from(i: i64) -> Self {
        ParamValue::Integer(i)
    }
}

impl From<f64> for ParamValue {
    fn from(f: f64) -> Self {
        ParamValue::Float(f)
    }
}

impl From<bool> for ParamValue {
    fn from(b: bool) -> Self {
        ParamValue::Boolean(b)
    }
}

/// Run-wide constants, in declaration order.
pub type Settings = IndexMap<String, ParamValue>;

/// A partial assignment; any task matching every pair is skipped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExclusionRule {
    pub predicate: IndexMap<String, ParamValue>,
}

impl ExclusionRule {
    pub fn new<K: Into<String>, V: Into<ParamValue>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        ExclusionRule {
            predicate: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }
}

/// The `[runner]` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerSection {
    pub command: String,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigMatrix {
    /// Dimension name to value list, in declaration order.
    pub parameters: IndexMap<String, Vec<ParamValue>>,
    pub settings: Settings,
    pub exclusions: Vec<ExclusionRule>,
    pub runner: Option<RunnerSection>,
}

impl ConfigMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dimension<K: Into<String>, V: Into<ParamValue>>(
        mut self,
        name: K,
        values: impl IntoIterator<Item = V>,
    ) -> Self {
        self.parameters
            .insert(name.into(), values.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_setting(mut self, name: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.settings.insert(name.into(), value.into());
        self
    }

    pub fn with_exclusion(mut self, rule: ExclusionRule) -> Self {
        self.exclusions.push(rule);
        self
    }

    pub fn dimension_names(&self) -> impl Iterator<Item = &str> {
        self.parameters.keys().map(String::as_str)
    }

    pub fn dimension_sizes(&self) -> Vec<usize> {
        self.parameters.values().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing [parameters] table")]
    MissingParameters,
    #[error("`{path}` must be a table")]
    NotATable { path: String },
    #[error("dimension `{name}` must be an array of scalars")]
    NonListDimension { name: String },
    #[error(
        "`{path}` has unsupported value type {found}; only string, integer, float and boolean scalars are allowed"
    )]
    UnsupportedValue { path: String, found: String },
    #[error("`exclude` must be an array of tables")]
    MalformedExclude,
    #[error("invalid [runner] table: {0}")]
    Runner(String),
    #[error("unknown top-level key `{0}`")]
    UnknownKey(String),
}

/// Parses a configuration matrix, preserving dimension declaration order.
pub fn parse_config(source: &str, format: ConfigFormat) -> Result<ConfigMatrix, ConfigError> {
    match format {
        ConfigFormat::Toml => parse_toml(source),
    }
}

fn parse_toml(source: &str) -> Result<ConfigMatrix, ConfigError> {
    let table: toml::Table = source.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map(|span| line_col(source, span.start)).unwrap_or((1, 1));
        ConfigError::Syntax {
            line,
            column,
            message: e.message().to_owned(),
        }
    })?;

    let mut config = ConfigMatrix::default();
    let mut seen_parameters = false;
    for (key, value) in &table {
        match key.as_str() {
            "parameters" => {
                seen_parameters = true;
                let dims = value.as_table().ok_or_else(|| ConfigError::NotATable {
                    path: "parameters".into(),
                })?;
                for (name, values) in dims {
                    let list = values
                        .as_array()
                        .ok_or_else(|| ConfigError::NonListDimension { name: name.clone() })?;
                    let mut parsed = Vec::with_capacity(list.len());
                    for (i, v) in list.iter().enumerate() {
                        parsed.push(scalar(v, || format!("parameters.{name}[{i}]"))?);
                    }
                    config.parameters.insert(name.clone(), parsed);
                }
            }
            "settings" => {
                let settings = value.as_table().ok_or_else(|| ConfigError::NotATable {
                    path: "settings".into(),
                })?;
                for (name, v) in settings {
                    let parsed = scalar(v, || format!("settings.{name}"))?;
                    config.settings.insert(name.clone(), parsed);
                }
            }
            "exclude" => {
                let rules = value.as_array().ok_or(ConfigError::MalformedExclude)?;
                for (i, rule) in rules.iter().enumerate() {
                    let rule = rule.as_table().ok_or(ConfigError::MalformedExclude)?;
                    let mut predicate = IndexMap::new();
                    for (name, v) in rule {
                        predicate.insert(name.clone(), scalar(v, || format!("exclude[{i}].{name}"))?);
                    }
                    config.exclusions.push(ExclusionRule { predicate });
                }
            }
            "runner" => config.runner = Some(parse_runner(value)?),
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
    }
    if !seen_parameters {
        return Err(ConfigError::MissingParameters);
    }
    Ok(config)
}

fn parse_runner(value: &Value) -> Result<RunnerSection, ConfigError> {
    let table = value
        .as_table()
        .ok_or_else(|| ConfigError::NotATable { path: "runner".into() })?;
    let mut command = None;
    let mut timeout_ms = None;
    for (key, v) in table {
        match key.as_str() {
            "command" => {
                command = Some(
                    v.as_str()
                        .ok_or_else(|| ConfigError::Runner("`command` must be a string".into()))?
                        .to_owned(),
                )
            }
            "timeout_ms" => {
                let ms = v
                    .as_integer()
                    .filter(|ms| *ms > 0)
                    .ok_or_else(|| ConfigError::Runner("`timeout_ms` must be a positive integer".into()))?;
                timeout_ms = Some(ms as u64);
            }
            other => return Err(ConfigError::Runner(format!("unknown key `{other}`"))),
        }
    }
    let command = command.ok_or_else(|| ConfigError::Runner("missing `command`".into()))?;
    Ok(RunnerSection { command, timeout_ms })
}

fn scalar(value: &Value, path: impl FnOnce() -> String) -> Result<ParamValue, ConfigError> {
    ParamValue::from_toml(value).ok_or_else(|| ConfigError::UnsupportedValue {
        path: path(),
        found: value.type_str().to_owned(),
    })
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let prefix = &source[..offset.min(source.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Error)]
#[error("null values cannot be written as TOML (at `{0}`)")]
pub struct SerializeError(String);

/// Writes the matrix back out as TOML. `parse_config` of the output yields
/// an equal matrix.
pub fn to_toml_string(config: &ConfigMatrix) -> Result<String, SerializeError> {
    let mut root = toml::Table::new();

    let mut params = toml::Table::new();
    for (name, values) in &config.parameters {
        let list = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.to_toml()
                    .ok_or_else(|| SerializeError(format!("parameters.{name}[{i}]")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        params.insert(name.clone(), Value::Array(list));
    }
    root.insert("parameters".into(), Value::Table(params));

    if !config.settings.is_empty() {
        let mut settings = toml::Table::new();
        for (name, v) in &config.settings {
            let v = v.to_toml().ok_or_else(|| SerializeError(format!("settings.{name}")))?;
            settings.insert(name.clone(), v);
        }
        root.insert("settings".into(), Value::Table(settings));
    }

    if !config.exclusions.is_empty() {
        let mut rules = Vec::with_capacity(config.exclusions.len());
        for (i, rule) in config.exclusions.iter().enumerate() {
            let mut t = toml::Table::new();
            for (name, v) in &rule.predicate {
                let v = v
                    .to_toml()
                    .ok_or_else(|| SerializeError(format!("exclude[{i}].{name}")))?;
                t.insert(name.clone(), v);
            }
            rules.push(Value::Table(t));
        }
        root.insert("exclude".into(), Value::Array(rules));
    }

    if let Some(runner) = &config.runner {
        let mut t = toml::Table::new();
        t.insert("command".into(), Value::String(runner.command.clone()));
        if let Some(ms) = runner.timeout_ms {
            t.insert("timeout_ms".into(), Value::Integer(ms as i64));
        }
        root.insert("runner".into(), Value::Table(t));
    }

    Ok(toml::to_string(&root).expect("a toml::Table always serializes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

/// A validation finding. `code` is stable across releases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: &'static str,
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn error(code: &'static str, path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            code,
            path: path.into(),
            message: message.into(),
        }
    }

    fn warning(code: &'static str, path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            code,
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]: {}: {}", self.severity, self.code, self.path, self.message)
    }
}

pub mod codes {
    pub const NO_PARAMETERS: &str = "E001";
    pub const EMPTY_DIMENSION: &str = "E002";
    pub const DUPLICATE_VALUE: &str = "E003";
    pub const NAME_COLLISION: &str = "E004";
    pub const NON_FINITE: &str = "E005";
    pub const EMPTY_EXCLUSION: &str = "E010";
    pub const UNKNOWN_EXCLUSION_KEY: &str = "E011";
    pub const EXCLUSION_VALUE_NOT_IN_DOMAIN: &str = "E012";
    pub const TEMPLATE_SYNTAX: &str = "E020";
    pub const UNKNOWN_PLACEHOLDER: &str = "E021";
    pub const PLAN_TOO_LARGE: &str = "E030";
    pub const ENV_NAME_COLLISION: &str = "W001";
    pub const DUPLICATE_EXCLUSION: &str = "W002";
    pub const EVERYTHING_EXCLUDED: &str = "W003";
}

/// Checks every matrix invariant. An empty result means the matrix is
/// valid; callers decide whether warnings are fatal.
pub fn validate(config: &ConfigMatrix) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if config.parameters.is_empty() {
        out.push(Diagnostic::error(
            codes::NO_PARAMETERS,
            "parameters",
            "at least one parameter dimension is required",
        ));
    }

    for (name, values) in &config.parameters {
        let path = format!("parameters.{name}");
        if values.is_empty() {
            out.push(Diagnostic::error(
                codes::EMPTY_DIMENSION,
                &path,
                "dimension has no values",
            ));
        }
        let mut seen = HashSet::new();
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                out.push(Diagnostic::error(
                    codes::NON_FINITE,
                    format!("{path}[{i}]"),
                    "floats must be finite",
                ));
            }
            if !seen.insert(v) {
                out.push(Diagnostic::error(
                    codes::DUPLICATE_VALUE,
                    &path,
                    format!("duplicate value {} in dimension `{name}`", describe(v)),
                ));
            }
        }
        if config.settings.contains_key(name) {
            out.push(Diagnostic::error(
                codes::NAME_COLLISION,
                &path,
                format!("`{name}` is both a dimension and a setting"),
            ));
        }
    }

    for (name, v) in &config.settings {
        if !v.is_finite() {
            out.push(Diagnostic::error(
                codes::NON_FINITE,
                format!("settings.{name}"),
                "floats must be finite",
            ));
        }
    }

    let mut env_names: BTreeMap<String, &str> = BTreeMap::new();
    let named = config
        .parameters
        .keys()
        .map(|n| (crate::engine::env_var_name("MXRUN_P_", n), n))
        .chain(
            config
                .settings
                .keys()
                .map(|n| (crate::engine::env_var_name("MXRUN_S_", n), n)),
        );
    for (env, name) in named {
        if let Some(prev) = env_names.insert(env.clone(), name) {
            out.push(Diagnostic::warning(
                codes::ENV_NAME_COLLISION,
                name.as_str(),
                format!("`{name}` and `{prev}` share the environment variable {env}"),
            ));
        }
    }

    let mut seen_rules: Vec<&ExclusionRule> = Vec::new();
    for (i, rule) in config.exclusions.iter().enumerate() {
        let path = format!("exclude[{i}]");
        if rule.predicate.is_empty() {
            out.push(Diagnostic::error(
                codes::EMPTY_EXCLUSION,
                &path,
                "exclusion rule is empty",
            ));
        }
        for (key, value) in &rule.predicate {
            match config.parameters.get(key) {
                None => out.push(Diagnostic::error(
                    codes::UNKNOWN_EXCLUSION_KEY,
                    format!("{path}.{key}"),
                    format!("`{key}` is not a parameter dimension"),
                )),
                Some(values) if !values.contains(value) => out.push(Diagnostic::error(
                    codes::EXCLUSION_VALUE_NOT_IN_DOMAIN,
                    format!("{path}.{key}"),
                    format!("{} is not a declared value of `{key}`", describe(value)),
                )),
                Some(_) => {}
            }
        }
        if seen_rules.iter().any(|r| same_predicate(r, rule)) {
            out.push(Diagnostic::warning(
                codes::DUPLICATE_EXCLUSION,
                &path,
                "exclusion rule repeats an earlier rule",
            ));
        }
        seen_rules.push(rule);
    }

    if let Some(runner) = &config.runner {
        match CommandTemplate::parse(&runner.command) {
            Err(e) => out.push(Diagnostic::error(
                codes::TEMPLATE_SYNTAX,
                "runner.command",
                e.to_string(),
            )),
            Ok(template) => {
                for name in template.placeholders() {
                    if !config.parameters.contains_key(name) && !config.settings.contains_key(name) {
                        out.push(Diagnostic::error(
                            codes::UNKNOWN_PLACEHOLDER,
                            "runner.command",
                            format!("placeholder `{{{name}}}` names no dimension or setting"),
                        ));
                    }
                }
            }
        }
    }

    if !out.iter().any(Diagnostic::is_error) {
        let count = count_tasks(config);
        if count.total > MAX_PLAN_TASKS as u128 {
            out.push(Diagnostic::error(
                codes::PLAN_TOO_LARGE,
                "parameters",
                format!("matrix has {} combinations; the limit is {MAX_PLAN_TASKS}", count.total),
            ));
        } else if count.total == count.excluded {
            out.push(Diagnostic::warning(
                codes::EVERYTHING_EXCLUDED,
                "exclude",
                "every combination is excluded; the plan is empty",
            ));
        }
    }

    out
}

fn same_predicate(a: &ExclusionRule, b: &ExclusionRule) -> bool {
    a.predicate.len() == b.predicate.len() && a.predicate.iter().all(|(k, v)| b.predicate.get(k) == Some(v))
}

fn describe(v: &ParamValue) -> String {
    match v {
        ParamValue::String(s) => format!("{s:?}"),
        other => format!("{} {}", other.type_name(), other),
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn value() -> impl Strategy<Value = ParamValue> {
        prop_oneof![
            "[a-z0-9_=\\\\ \n]{0,6}".prop_map(ParamValue::String),
            any::<i64>().prop_map(ParamValue::Integer),
            any::<f64>()
                .prop_filter("finite", |f| f.is_finite())
                .prop_map(ParamValue::Float),
            any::<bool>().prop_map(ParamValue::Boolean),
        ]
    }

    fn matrix() -> impl Strategy<Value = ConfigMatrix> {
        (
            proptest::collection::vec(("[a-z][a-z0-9_]{0,5}", proptest::collection::vec(value(), 1..4)), 1..4),
            proptest::collection::vec(("[A-Z][a-z]{0,4}", value()), 0..3),
        )
            .prop_map(|(dims, settings)| {
                let mut c = ConfigMatrix::new();
                for (name, values) in dims {
                    c.parameters.insert(name, values);
                }
                for (name, v) in settings {
                    c.settings.insert(name, v);
                }
                let first = c.parameters.first().map(|(k, v)| (k.clone(), v[0].clone()));
                if let Some((k, v)) = first {
                    c.exclusions.push(ExclusionRule::new([(k, v)]));
                }
                c
            })
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(c in matrix()) {
            let text = to_toml_string(&c).unwrap();
            let once = parse_config(&text, ConfigFormat::Toml).unwrap();
            prop_assert_eq!(&once, &c);
            let again = parse_config(&to_toml_string(&once).unwrap(), ConfigFormat::Toml).unwrap();
            prop_assert_eq!(again, once);
        }

        #[test]
        fn validate_never_panics(s in "\\[parameters\\]\n([a-z]{1,3} = \\[[0-9a-z\", .\\[\\]{}=]{0,12}\\]\n){0,3}(\\[\\[exclude\\]\\]\n[a-z]{1,3} = [0-9\"a-z]{1,3}\n)?") {
            if let Ok(c) = parse_config(&s, ConfigFormat::Toml) {
                let _ = validate(&c);
            }
        }
    }
}
