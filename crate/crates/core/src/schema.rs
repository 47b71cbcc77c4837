//! Synoptic template, case inputs, attribute records and the round-indexed
//! record store.
//!
//! A [`TemplateSchema`] is the universe of variables a run extracts. Each case
//! accumulates one [`AttributeVector`] per round in a [`RecordStore`]; round 0
//! is the baseline extraction and rounds `1..` are reflection rounds. Once a
//! case converges its later rounds are filled forward with the converged
//! values.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value as Json;

/// Values with information-absence semantics. They are never counted as
/// standard values.
pub const SPECIAL_VALUES: [&str; 4] = [
    "Not applicable",
    "Cannot be determined",
    "Not specified",
    "Other",
];

/// Tolerance used whenever two numeric values are compared for equality.
pub const NUMERIC_TOLERANCE: f64 = 1e-9;

pub fn is_special_value(s: &str) -> bool {
    SPECIAL_VALUES.contains(&s)
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("duplicate variable `{0}` in template")]
    DuplicateVariable(String),
    #[error("variable `{0}` has an empty value list")]
    EmptyValues(String),
    #[error("variable `{var}` lists `{value}` more than once")]
    DuplicateValue { var: String, value: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("case `{case}` has no round {round}")]
    MissingRound { case: String, round: u32 },
    #[error("case `{case}`: expected round {expected}, got {got}")]
    NonContiguousRound { case: String, expected: u32, got: u32 },
    #[error("case `{0}` has not converged")]
    NotConverged(String),
    #[error("case `{case}`: cannot fill round {round}, converged at {converged_at}")]
    FillBeforeConvergence {
        case: String,
        round: u32,
        converged_at: u32,
    },
    #[error("invalid case input: {0}")]
    InvalidCase(String),
    #[error("records file line {line}: {message}")]
    RecordsFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Standard values in declaration order (categorical only).
    pub standard_values: Vec<String>,
    /// Unit of a numeric variable, e.g. `cm`.
    pub unit: Option<String>,
    /// Special values permitted for this variable.
    pub special_values: Vec<String>,
    /// The value list exactly as the template declared it. Used when the
    /// template is rendered back into a prompt.
    pub declared_values: Vec<String>,
    /// Whether the template restricted the special values explicitly.
    pub explicit_specials: bool,
}

impl VariableSpec {
    pub fn categorical<I, S>(name: impl Into<String>, values: I) -> Result<Self, SchemaError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        let declared: Vec<String> = values.into_iter().map(Into::into).collect();
        build_categorical(name, declared, None)
    }

    pub fn numeric(name: impl Into<String>, unit: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Numeric,
            standard_values: Vec::new(),
            unit: Some(unit.into()),
            special_values: SPECIAL_VALUES.iter().map(|s| s.to_string()).collect(),
            declared_values: Vec::new(),
            explicit_specials: false,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.kind == VariableKind::Numeric
    }

    /// Length units admit only non-negative values.
    pub fn is_length(&self) -> bool {
        matches!(
            self.unit.as_deref(),
            Some("cm") | Some("mm") | Some("m") | Some("in")
        )
    }

    pub fn permits_special(&self, value: &str) -> bool {
        self.special_values.iter().any(|s| s == value)
    }

    /// The list of candidate answers shown in a one-by-one prompt.
    pub fn prompt_values(&self) -> Vec<String> {
        match self.kind {
            VariableKind::Categorical => self.declared_values.clone(),
            VariableKind::Numeric => {
                let unit = self.unit.as_deref().unwrap_or("");
                let mut out = vec![format!("<a number in {unit}>")];
                out.extend(self.declared_values.iter().cloned());
                out
            }
        }
    }

    fn template_json(&self) -> Json {
        match self.kind {
            VariableKind::Categorical if !self.explicit_specials => {
                Json::from(self.declared_values.clone())
            }
            VariableKind::Categorical => serde_json::json!({
                "type": "categorical",
                "values": self.standard_values,
                "special_values": self.special_values,
            }),
            VariableKind::Numeric => {
                let mut obj = serde_json::Map::new();
                obj.insert("type".into(), "numeric".into());
                obj.insert("unit".into(), self.unit.clone().unwrap_or_default().into());
                if self.explicit_specials {
                    obj.insert("special_values".into(), self.special_values.clone().into());
                }
                Json::Object(obj)
            }
        }
    }
}

fn build_categorical(
    name: String,
    declared: Vec<String>,
    specials: Option<Vec<String>>,
) -> Result<VariableSpec, SchemaError> {
    if declared.is_empty() {
        return Err(SchemaError::EmptyValues(name));
    }
    let mut seen = HashSet::new();
    for v in &declared {
        if !seen.insert(v.as_str()) {
            return Err(SchemaError::DuplicateValue {
                var: name,
                value: v.clone(),
            });
        }
    }
    let standard: Vec<String> = declared
        .iter()
        .filter(|v| !is_special_value(v))
        .cloned()
        .collect();
    if standard.is_empty() {
        return Err(SchemaError::EmptyValues(name));
    }
    let explicit = specials.is_some();
    let special_values = match specials {
        Some(list) => {
            for s in &list {
                if standard.contains(s) {
                    return Err(SchemaError::Malformed(format!(
                        "`{name}`: `{s}` is both standard and special"
                    )));
                }
            }
            list
        }
        None => SPECIAL_VALUES.iter().map(|s| s.to_string()).collect(),
    };
    Ok(VariableSpec {
        name,
        kind: VariableKind::Categorical,
        standard_values: standard,
        unit: None,
        special_values,
        declared_values: declared,
        explicit_specials: explicit,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateSchema {
    pub variables: IndexMap<String, VariableSpec>,
    pub version: String,
}

/// Deserializes a JSON object into its entries in document order while
/// rejecting duplicate keys, which a plain map would silently collapse.
struct OrderedEntries(Vec<(String, Json)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object mapping variable names to value lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Json>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn string_list(var: &str, v: &Json) -> Result<Vec<String>, SchemaError> {
    let arr = v
        .as_array()
        .ok_or_else(|| SchemaError::Malformed(format!("`{var}`: expected an array of strings")))?;
    arr.iter()
        .map(|x| {
            x.as_str().map(str::to_owned).ok_or_else(|| {
                SchemaError::Malformed(format!("`{var}`: value list must contain only strings"))
            })
        })
        .collect()
}

impl TemplateSchema {
    pub fn new(version: impl Into<String>) -> Self {
        TemplateSchema {
            variables: IndexMap::new(),
            version: version.into(),
        }
    }

    pub fn with_variable(mut self, spec: VariableSpec) -> Result<Self, SchemaError> {
        if self.variables.contains_key(&spec.name) {
            return Err(SchemaError::DuplicateVariable(spec.name));
        }
        self.variables.insert(spec.name.clone(), spec);
        Ok(self)
    }

    /// Loads a template from its JSON form: an object mapping each variable
    /// name to either an array of values or `{"type":"numeric","unit":..}`.
    pub fn load(source: impl std::io::Read) -> Result<Self, SchemaError> {
        let mut de = serde_json::Deserializer::from_reader(source);
        let entries = OrderedEntries::deserialize(&mut de)
            .map_err(|e| SchemaError::Malformed(e.to_string()))?;
        de.end().map_err(|e| SchemaError::Malformed(e.to_string()))?;

        let mut schema = TemplateSchema::new("1");
        for (name, body) in entries.0 {
            if schema.variables.contains_key(&name) {
                return Err(SchemaError::DuplicateVariable(name));
            }
            let spec = match &body {
                Json::Array(_) => build_categorical(name.clone(), string_list(&name, &body)?, None)?,
                Json::Object(obj) => {
                    let specials = obj
                        .get("special_values")
                        .map(|v| string_list(&name, v))
                        .transpose()?;
                    if let Some(list) = &specials {
                        if let Some(bad) = list.iter().find(|s| !is_special_value(s)) {
                            return Err(SchemaError::Malformed(format!(
                                "`{name}`: `{bad}` is not a special value"
                            )));
                        }
                    }
                    match obj.get("type").and_then(Json::as_str) {
                        Some("numeric") => {
                            let unit = obj.get("unit").and_then(Json::as_str).ok_or_else(|| {
                                SchemaError::Malformed(format!("`{name}`: numeric variable needs a unit"))
                            })?;
                            let mut spec = VariableSpec::numeric(name.clone(), unit);
                            if let Some(list) = specials {
                                spec.declared_values = list.clone();
                                spec.special_values = list;
                                spec.explicit_specials = true;
                            }
                            spec
                        }
                        Some("categorical") => {
                            let values = obj.get("values").ok_or_else(|| {
                                SchemaError::Malformed(format!("`{name}`: missing `values`"))
                            })?;
                            let mut declared = string_list(&name, values)?;
                            if let Some(list) = &specials {
                                declared.extend(list.iter().filter(|s| !declared.contains(s)).cloned().collect::<Vec<_>>());
                            }
                            build_categorical(name.clone(), declared, specials)?
                        }
                        other => {
                            return Err(SchemaError::Malformed(format!(
                                "`{name}`: unsupported variable type {other:?}"
                            )))
                        }
                    }
                }
                _ => {
                    return Err(SchemaError::Malformed(format!(
                        "`{name}`: expected an array or an object"
                    )))
                }
            };
            schema.variables.insert(name, spec);
        }
        Ok(schema)
    }

    pub fn from_json_str(s: &str) -> Result<Self, SchemaError> {
        Self::load(s.as_bytes())
    }

    pub fn get(&self, var: &str) -> Result<&VariableSpec, SchemaError> {
        self.variables
            .get(var)
            .ok_or_else(|| SchemaError::UnknownVariable(var.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    /// The template in its JSON document form, declaration order preserved.
    pub fn to_template_json(&self) -> Json {
        let mut obj = serde_json::Map::new();
        for (name, spec) in &self.variables {
            obj.insert(name.clone(), spec.template_json());
        }
        Json::Object(obj)
    }

    /// Classifies a raw answer for `var`.
    pub fn validate_value(&self, var: &str, raw: &str) -> Result<ValidationResult, SchemaError> {
        let spec = self.get(var)?;
        let trimmed = raw.trim();
        if spec.permits_special(trimmed) {
            return Ok(ValidationResult::Special(trimmed.to_owned()));
        }
        match spec.kind {
            VariableKind::Categorical => {
                if spec.standard_values.iter().any(|v| v == trimmed) {
                    Ok(ValidationResult::Standard(trimmed.to_owned()))
                } else {
                    Ok(ValidationResult::NonStandard(raw.to_owned()))
                }
            }
            VariableKind::Numeric => match parse_number(trimmed, spec.unit.as_deref()) {
                Some(x) if !(spec.is_length() && x < 0.0) => Ok(ValidationResult::Numeric(x)),
                _ => Ok(ValidationResult::NonStandard(raw.to_owned())),
            },
        }
    }
}

/// Parses a finite number, tolerating a trailing unit such as `5.5 cm`.
pub fn parse_number(s: &str, unit: Option<&str>) -> Option<f64> {
    let s = s.trim();
    let s = match unit {
        Some(u) if !u.is_empty() => s.strip_suffix(u).map(str::trim_end).unwrap_or(s),
        _ => s,
    };
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationResult {
    Standard(String),
    Special(String),
    Numeric(f64),
    NonStandard(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseInput {
    pub id: String,
    pub text: String,
}

impl CaseInput {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        CaseInput {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Reads a JSON-lines cases file of `{"id": .., "text": ..}` objects.
pub fn read_cases(reader: impl BufRead) -> Result<Vec<CaseInput>, SchemaError> {
    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: CaseInput = serde_json::from_str(&line).map_err(|e| SchemaError::RecordsFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if case.id.is_empty() {
            return Err(SchemaError::InvalidCase(format!("line {}: empty id", i + 1)));
        }
        if case.text.trim().is_empty() {
            return Err(SchemaError::InvalidCase(format!("case `{}`: empty text", case.id)));
        }
        if !ids.insert(case.id.clone()) {
            return Err(SchemaError::InvalidCase(format!("duplicate case id `{}`", case.id)));
        }
        cases.push(case);
    }
    Ok(cases)
}

/// A recorded value: a standard or special string, or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            Value::Number(_) => None,
        }
    }

    /// Numeric reading of the value; text that parses as a number counts.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Text(s) => parse_number(s, None),
        }
    }

    pub fn is_special(&self) -> bool {
        matches!(self, Value::Text(s) if is_special_value(s.trim()))
    }

    /// Value equality used for convergence: numbers within
    /// [`NUMERIC_TOLERANCE`], text after trimming.
    pub fn value_eq(&self, other: &Value) -> bool {
        match (self.as_number(), other.as_number()) {
            (Some(a), Some(b)) => (a - b).abs() <= NUMERIC_TOLERANCE,
            (None, None) => match (self, other) {
                (Value::Text(a), Value::Text(b)) => a.trim() == b.trim(),
                _ => false,
            },
            _ => false,
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Number(x) => serde_json::Number::from_f64(*x)
                .map(Json::Number)
                .unwrap_or(Json::Null),
            Value::Text(s) => Json::String(s.clone()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(x) => write!(f, "{x}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Number(x)
    }
}

/// Provenance markers attached to a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFlag {
    NonStandard,
    BeliefOutOfRange,
    BeliefUnparseable,
    ParseFailure,
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub value: Value,
    pub evidence: Vec<String>,
    pub explanation: String,
    pub belief: f64,
    pub flags: BTreeSet<RecordFlag>,
}

impl AttributeRecord {
    pub fn new(value: impl Into<Value>) -> Self {
        AttributeRecord {
            value: value.into(),
            evidence: Vec::new(),
            explanation: String::new(),
            belief: 0.0,
            flags: BTreeSet::new(),
        }
    }

    pub fn with_belief(mut self, belief: f64) -> Self {
        self.belief = belief.clamp(0.0, 1.0);
        self
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        self.explanation = explanation.into();
        self
    }

    pub fn with_evidence<I, S>(mut self, evidence: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.evidence = evidence.into_iter().map(Into::into).collect();
        self
    }

    pub fn flagged(mut self, flag: RecordFlag) -> Self {
        self.flags.insert(flag);
        self
    }
}

/// One round's assignment of values to variables for one case.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeVector {
    pub assignments: BTreeMap<String, AttributeRecord>,
}

impl AttributeVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, var: impl Into<String>, record: AttributeRecord) {
        self.assignments.insert(var.into(), record);
    }

    pub fn with(mut self, var: impl Into<String>, record: AttributeRecord) -> Self {
        self.insert(var, record);
        self
    }

    /// Convenience: set a bare value with no evidence.
    pub fn with_value(self, var: impl Into<String>, value: impl Into<Value>) -> Self {
        self.with(var, AttributeRecord::new(value))
    }

    pub fn get(&self, var: &str) -> Option<&AttributeRecord> {
        self.assignments.get(var)
    }

    pub fn value(&self, var: &str) -> Option<&Value> {
        self.assignments.get(var).map(|r| &r.value)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// A copy carrying only the value fields.
    pub fn values_only(&self) -> AttributeVector {
        AttributeVector {
            assignments: self
                .assignments
                .iter()
                .map(|(k, r)| (k.clone(), AttributeRecord::new(r.value.clone())))
                .collect(),
        }
    }

    pub fn has_flag(&self, flag: RecordFlag) -> bool {
        self.assignments.values().any(|r| r.flags.contains(&flag))
    }

    /// Checks that every key names a schema variable.
    pub fn check_keys(&self, schema: &TemplateSchema) -> Result<(), SchemaError> {
        match self.assignments.keys().find(|k| !schema.variables.contains_key(*k)) {
            Some(k) => Err(SchemaError::UnknownVariable(k.clone())),
            None => Ok(()),
        }
    }
}

/// Variables whose value fields differ between `a` and `b`. A variable
/// present on one side only counts as different.
pub fn diff_vectors(a: &AttributeVector, b: &AttributeVector) -> BTreeSet<String> {
    let keys: BTreeSet<&String> = a.assignments.keys().chain(b.assignments.keys()).collect();
    keys.into_iter()
        .filter(|k| match (a.value(k), b.value(k)) {
            (Some(x), Some(y)) => !x.value_eq(y),
            _ => true,
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseHistory {
    pub rounds: Vec<AttributeVector>,
    /// 0 while unconverged, otherwise the round at which the case converged.
    pub converged_at: u32,
}

/// Round-indexed history of every case, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordStore {
    cases: IndexMap<String, CaseHistory>,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.cases.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn contains(&self, case: &str) -> bool {
        self.cases.contains_key(case)
    }

    pub fn history(&self, case: &str) -> Result<&CaseHistory, SchemaError> {
        self.cases
            .get(case)
            .ok_or_else(|| SchemaError::UnknownCase(case.to_owned()))
    }

    fn history_mut(&mut self, case: &str) -> Result<&mut CaseHistory, SchemaError> {
        self.cases
            .get_mut(case)
            .ok_or_else(|| SchemaError::UnknownCase(case.to_owned()))
    }

    /// Appends the vector for `round`, which must be the next round index.
    pub fn push_round(
        &mut self,
        case: &str,
        round: u32,
        vector: AttributeVector,
    ) -> Result<(), SchemaError> {
        let history = self.cases.entry(case.to_owned()).or_default();
        let expected = history.rounds.len() as u32;
        if round != expected {
            return Err(SchemaError::NonContiguousRound {
                case: case.to_owned(),
                expected,
                got: round,
            });
        }
        history.rounds.push(vector);
        Ok(())
    }

    pub fn get(&self, case: &str, round: u32) -> Result<&AttributeVector, SchemaError> {
        self.history(case)?
            .rounds
            .get(round as usize)
            .ok_or(SchemaError::MissingRound {
                case: case.to_owned(),
                round,
            })
    }

    pub fn latest(&self, case: &str) -> Result<(u32, &AttributeVector), SchemaError> {
        let h = self.history(case)?;
        h.rounds
            .last()
            .map(|v| (h.rounds.len() as u32 - 1, v))
            .ok_or(SchemaError::MissingRound {
                case: case.to_owned(),
                round: 0,
            })
    }

    /// Number of stored rounds for `case`.
    pub fn round_count(&self, case: &str) -> Result<u32, SchemaError> {
        Ok(self.history(case)?.rounds.len() as u32)
    }

    pub fn converged_at(&self, case: &str) -> Result<u32, SchemaError> {
        Ok(self.history(case)?.converged_at)
    }

    pub fn set_converged(&mut self, case: &str, round: u32) -> Result<(), SchemaError> {
        self.history_mut(case)?.converged_at = round;
        Ok(())
    }

    /// Up to `p` most recent vectors, oldest first, with their round indices.
    pub fn last_rounds(
        &self,
        case: &str,
        p: usize,
    ) -> Result<Vec<(u32, &AttributeVector)>, SchemaError> {
        let h = self.history(case)?;
        if h.rounds.is_empty() {
            return Err(SchemaError::MissingRound {
                case: case.to_owned(),
                round: 0,
            });
        }
        let start = h.rounds.len().saturating_sub(p);
        Ok(h.rounds[start..]
            .iter()
            .enumerate()
            .map(|(i, v)| ((start + i) as u32, v))
            .collect())
    }

    /// Stores at `round` (and any gap before it) a copy of the converged
    /// vector's values.
    pub fn fill_forward(&mut self, case: &str, round: u32) -> Result<(), SchemaError> {
        let h = self.history_mut(case)?;
        let at = h.converged_at;
        if at == 0 {
            return Err(SchemaError::NotConverged(case.to_owned()));
        }
        if round <= at {
            return Err(SchemaError::FillBeforeConvergence {
                case: case.to_owned(),
                round,
                converged_at: at,
            });
        }
        let source = h
            .rounds
            .get(at as usize)
            .ok_or(SchemaError::MissingRound {
                case: case.to_owned(),
                round: at,
            })?
            .clone();
        let round = round as usize;
        if round < h.rounds.len() {
            h.rounds[round] = source;
        } else {
            h.rounds.resize(round + 1, source);
        }
        Ok(())
    }

    /// Writes the store as JSON lines, one object per (case, round).
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), SchemaError> {
        for (case, h) in &self.cases {
            for (round, v) in h.rounds.iter().enumerate() {
                let line = RecordLine::from_vector(case, round as u32, v, h.converged_at);
                serde_json::to_writer(&mut out, &line)
                    .map_err(|e| SchemaError::Io(e.into()))?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Reads a records file. Lines of a case must appear in round order.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, SchemaError> {
        let mut store = RecordStore::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| SchemaError::RecordsFormat {
                line: i + 1,
                message,
            };
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let (case, round, converged_at) = (rec.case_id.clone(), rec.round, rec.converged_at);
            let vector = rec.into_vector();
            store
                .push_round(&case, round, vector)
                .map_err(|e| err(e.to_string()))?;
            store.set_converged(&case, converged_at)?;
        }
        Ok(store)
    }
}

/// One line of the records file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordLine {
    pub case_id: String,
    pub round: u32,
    pub values: BTreeMap<String, Value>,
    #[serde(default)]
    pub evidence: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub explanations: BTreeMap<String, String>,
    #[serde(default)]
    pub beliefs: BTreeMap<String, f64>,
    pub converged_at: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flags: BTreeMap<String, BTreeSet<RecordFlag>>,
}

impl RecordLine {
    pub fn from_vector(case: &str, round: u32, v: &AttributeVector, converged_at: u32) -> Self {
        let mut line = RecordLine {
            case_id: case.to_owned(),
            round,
            values: BTreeMap::new(),
            evidence: BTreeMap::new(),
            explanations: BTreeMap::new(),
            beliefs: BTreeMap::new(),
            converged_at,
            flags: BTreeMap::new(),
        };
        for (k, r) in &v.assignments {
            line.values.insert(k.clone(), r.value.clone());
            line.evidence.insert(k.clone(), r.evidence.clone());
            line.explanations.insert(k.clone(), r.explanation.clone());
            line.beliefs.insert(k.clone(), r.belief);
            if !r.flags.is_empty() {
                line.flags.insert(k.clone(), r.flags.clone());
            }
        }
        line
    }

    pub fn into_vector(mut self) -> AttributeVector {
        let mut v = AttributeVector::new();
        for (k, value) in self.values {
            v.insert(
                k.clone(),
                AttributeRecord {
                    value,
                    evidence: self.evidence.remove(&k).unwrap_or_default(),
                    explanation: self.explanations.remove(&k).unwrap_or_default(),
                    belief: self.beliefs.get(&k).copied().unwrap_or(0.0),
                    flags: self.flags.remove(&k).unwrap_or_default(),
                },
            );
        }
        v
    }
}
