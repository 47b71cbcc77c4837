//! Prompt templates for one-by-one and reflection queries, and parsing of the
//! JSON answers a model returns.

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};
use sha2::{Digest, Sha256};

use crate::knowledge::Section;
use crate::schema::{
    AttributeRecord, AttributeVector, RecordFlag, TemplateSchema, ValidationResult, Value,
    VariableSpec,
};

/// Placeholder names a template may use.
pub const VOCABULARY: [&str; 7] = [
    "var",
    "values",
    "gross_description",
    "knowledge_packages",
    "CAP_template",
    "synoptic_data_estimation",
    "inconsistence_examples",
];

pub const DEFAULT_ONE_BY_ONE: &str = include_str!("../assets/prompts/one_by_one.txt");
pub const DEFAULT_REFLECTION: &str = include_str!("../assets/prompts/reflection.txt");
pub const DEFAULT_INCONSISTENCY_EXAMPLES: &str =
    include_str!("../assets/prompts/inconsistency_examples.txt");

/// Heading that introduces each round block of the estimation slot.
pub const ROUND_LABEL: &str = "### Round ";

/// Rendered in place of an empty knowledge slot.
pub const NO_KNOWLEDGE: &str = "(none)";

const DESCRIPTION_SUFFIX: &str = " - Description";
const EXPLANATION_SUFFIX: &str = " - Explanation";
const BELIEF_SUFFIX: &str = " - Belief Degree";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("template uses unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("placeholder `{{{0}}}` has no value")]
    UnresolvedPlaceholder(String),
    #[error("expected a {expected:?} template, got {got:?}")]
    WrongTemplate { expected: PromptKind, got: PromptKind },
    #[error("case text is empty")]
    EmptyCaseText,
    #[error("variable `{0}` has no candidate values")]
    EmptyValues(String),
    #[error("reflection needs at least one estimation")]
    EmptyEstimations,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParseError {
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("reply contains no well-formed JSON object: {0}")]
    JsonMalformed(String),
    #[error("reply does not answer `{0}`")]
    MissingVariable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    OneByOne,
    Reflection,
}

/// Finds `{name}` placeholders: identifier characters between single braces.
fn placeholders(body: &str) -> impl Iterator<Item = (usize, &str)> {
    let bytes = body.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i] == b'{' {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                if j > start
                    && j < bytes.len()
                    && bytes[j] == b'}'
                    && !bytes[start].is_ascii_digit()
                {
                    i = j + 1;
                    return Some((start - 1, &body[start..j]));
                }
            }
            i += 1;
        }
        None
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(kind: PromptKind, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        if let Some((_, name)) = placeholders(&body).find(|(_, n)| !VOCABULARY.contains(n)) {
            return Err(PromptError::UnknownPlaceholder(name.to_owned()));
        }
        Ok(PromptTemplate { kind, body })
    }

    pub fn default_one_by_one() -> Self {
        Self::new(PromptKind::OneByOne, DEFAULT_ONE_BY_ONE).expect("bundled template is valid")
    }

    pub fn default_reflection() -> Self {
        Self::new(PromptKind::Reflection, DEFAULT_REFLECTION).expect("bundled template is valid")
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.body)
    }

    /// Single-pass substitution; substituted text is never rescanned.
    fn substitute(&self, slots: &BTreeMap<&str, String>) -> Result<RenderedPrompt, PromptError> {
        let mut text = String::with_capacity(self.body.len());
        let mut last = 0;
        for (pos, name) in placeholders(&self.body) {
            let content = slots
                .get(name)
                .ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_owned()))?;
            text.push_str(&self.body[last..pos]);
            text.push_str(content);
            last = pos + name.len() + 2;
        }
        text.push_str(&self.body[last..]);
        Ok(RenderedPrompt {
            kind: self.kind,
            text,
            slots: slots
                .iter()
                .map(|(k, v)| (k.to_string(), sha256_hex(v)))
                .collect(),
        })
    }

    fn expect_kind(&self, expected: PromptKind) -> Result<(), PromptError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(PromptError::WrongTemplate {
                expected,
                got: self.kind,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    /// Placeholder → hex digest of the substituted content.
    pub slots: BTreeMap<String, String>,
}

pub(crate) fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// The set of prompt assets a run uses.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub one_by_one: PromptTemplate,
    pub reflection: PromptTemplate,
    pub inconsistency_examples: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            one_by_one: PromptTemplate::default_one_by_one(),
            reflection: PromptTemplate::default_reflection(),
            inconsistency_examples: DEFAULT_INCONSISTENCY_EXAMPLES.to_owned(),
        }
    }
}

impl PromptSet {
    pub fn digests(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("one_by_one".to_owned(), self.one_by_one.digest()),
            ("reflection".to_owned(), self.reflection.digest()),
            (
                "inconsistency_examples".to_owned(),
                sha256_hex(&self.inconsistency_examples),
            ),
        ])
    }
}

pub fn render_one_by_one(
    tpl: &PromptTemplate,
    var: &str,
    values: &[String],
    gross: &str,
) -> Result<RenderedPrompt, PromptError> {
    tpl.expect_kind(PromptKind::OneByOne)?;
    if gross.trim().is_empty() {
        return Err(PromptError::EmptyCaseText);
    }
    if values.is_empty() {
        return Err(PromptError::EmptyValues(var.to_owned()));
    }
    let slots = BTreeMap::from([
        ("var", var.to_owned()),
        (
            "values",
            serde_json::to_string(values).expect("strings serialize"),
        ),
        ("gross_description", gross.to_owned()),
    ]);
    tpl.substitute(&slots)
}

/// Knowledge sections as prompt text, or [`NO_KNOWLEDGE`].
pub fn render_knowledge(sections: &[Section]) -> String {
    if sections.is_empty() {
        return NO_KNOWLEDGE.to_owned();
    }
    sections
        .iter()
        .map(|s| s.text.trim_end())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Flat `{variable: value}` object in schema order.
pub fn values_json(schema: &TemplateSchema, v: &AttributeVector) -> Json {
    let mut obj = Map::new();
    for name in schema.names() {
        if let Some(r) = v.get(name) {
            obj.insert(name.to_owned(), r.value.to_json());
        }
    }
    // variables outside the schema still show up, after the known ones
    for (name, r) in &v.assignments {
        if !obj.contains_key(name) {
            obj.insert(name.clone(), r.value.to_json());
        }
    }
    Json::Object(obj)
}

/// Round-labelled estimation blocks, oldest first.
pub fn render_estimations(schema: &TemplateSchema, estimations: &[(u32, &AttributeVector)]) -> String {
    estimations
        .iter()
        .map(|(round, v)| {
            format!(
                "{ROUND_LABEL}{round}\n```json\n{}\n```",
                serde_json::to_string_pretty(&values_json(schema, v)).expect("json")
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_reflection(
    tpl: &PromptTemplate,
    gross: &str,
    knowledge: &[Section],
    schema: &TemplateSchema,
    estimations: &[(u32, &AttributeVector)],
    examples: &str,
) -> Result<RenderedPrompt, PromptError> {
    tpl.expect_kind(PromptKind::Reflection)?;
    if gross.trim().is_empty() {
        return Err(PromptError::EmptyCaseText);
    }
    if estimations.is_empty() {
        return Err(PromptError::EmptyEstimations);
    }
    let slots = BTreeMap::from([
        ("gross_description", gross.to_owned()),
        ("knowledge_packages", render_knowledge(knowledge)),
        (
            "CAP_template",
            serde_json::to_string_pretty(&schema.to_template_json()).expect("json"),
        ),
        ("synoptic_data_estimation", render_estimations(schema, estimations)),
        ("inconsistence_examples", examples.to_owned()),
    ]);
    tpl.substitute(&slots)
}

/// Byte range of the first balanced `{...}` starting at `start`, honouring
/// JSON string escapes.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first syntactically complete JSON object in `text`, fenced or bare.
pub fn extract_first_object(text: &str) -> Result<Map<String, Json>, ParseError> {
    let bytes = text.as_bytes();
    let mut last_error = None;
    for (start, _) in text.match_indices('{') {
        let Some(end) = balanced_end(bytes, start) else {
            last_error.get_or_insert_with(|| "unbalanced braces".to_owned());
            continue;
        };
        match serde_json::from_str::<Map<String, Json>>(&text[start..=end]) {
            Ok(map) => return Ok(map),
            Err(e) => {
                last_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    match last_error {
        Some(e) => Err(ParseError::JsonMalformed(e)),
        None => Err(ParseError::NoJsonFound),
    }
}

/// Belief in [0, 1]. Out-of-range numbers are clamped, unparseable input
/// becomes 0; both cases carry a flag.
pub fn coerce_belief(raw: Option<&Json>) -> (f64, Option<RecordFlag>) {
    let parsed = match raw {
        Some(Json::Number(n)) => n.as_f64(),
        Some(Json::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match parsed {
        Some(x) if x.is_finite() => {
            if (0.0..=1.0).contains(&x) {
                (x, None)
            } else {
                (x.clamp(0.0, 1.0), Some(RecordFlag::BeliefOutOfRange))
            }
        }
        _ => (0.0, Some(RecordFlag::BeliefUnparseable)),
    }
}

fn coerce_evidence(raw: Option<&Json>) -> Vec<String> {
    match raw {
        None | Some(Json::Null) => Vec::new(),
        Some(Json::String(s)) => vec![s.clone()],
        Some(Json::Array(items)) => items
            .iter()
            .map(|x| match x {
                Json::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
        Some(other) => vec![other.to_string()],
    }
}

fn coerce_value(spec: &VariableSpec, schema: &TemplateSchema, raw: &Json) -> (Value, bool) {
    match raw {
        Json::String(s) => match schema.validate_value(&spec.name, s) {
            Ok(ValidationResult::Standard(v)) | Ok(ValidationResult::Special(v)) => {
                (Value::Text(v), false)
            }
            Ok(ValidationResult::Numeric(x)) => (Value::Number(x), false),
            _ => (Value::Text(s.trim().to_owned()), true),
        },
        Json::Number(n) if spec.is_numeric() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            (Value::Number(x), !x.is_finite() || (spec.is_length() && x < 0.0))
        }
        Json::Number(n) => (Value::Text(n.to_string()), true),
        other => (Value::Text(other.to_string()), true),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode<'a> {
    SingleVar(&'a str),
    AllVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReply {
    pub vector: AttributeVector,
    /// Keys that matched no schema variable.
    pub warnings: Vec<String>,
}

pub fn parse_model_json(
    text: &str,
    schema: &TemplateSchema,
    mode: ParseMode<'_>,
) -> Result<ParsedReply, ParseError> {
    let obj = extract_first_object(text)?;
    let wanted = |name: &str| match mode {
        ParseMode::SingleVar(v) => v == name,
        ParseMode::AllVars => true,
    };
    let mut vector = AttributeVector::new();
    for spec in schema.variables.values().filter(|s| wanted(&s.name)) {
        let Some(raw) = obj.get(&spec.name) else {
            continue;
        };
        let (value, nonstandard) = coerce_value(spec, schema, raw);
        let (belief, belief_flag) =
            coerce_belief(obj.get(&format!("{}{BELIEF_SUFFIX}", spec.name)));
        let mut record = AttributeRecord::new(value);
        record.belief = belief;
        record.evidence = coerce_evidence(obj.get(&format!("{}{DESCRIPTION_SUFFIX}", spec.name)));
        record.explanation = match obj.get(&format!("{}{EXPLANATION_SUFFIX}", spec.name)) {
            Some(Json::String(s)) => s.clone(),
            Some(Json::Null) | None => String::new(),
            Some(other) => other.to_string(),
        };
        if nonstandard {
            record.flags.insert(RecordFlag::NonStandard);
        }
        if let Some(f) = belief_flag {
            record.flags.insert(f);
        }
        vector.insert(spec.name.clone(), record);
    }
    if let ParseMode::SingleVar(var) = mode {
        if vector.is_empty() {
            return Err(ParseError::MissingVariable(var.to_owned()));
        }
    }

    let mut warnings = Vec::new();
    for key in obj.keys() {
        let base = [DESCRIPTION_SUFFIX, EXPLANATION_SUFFIX, BELIEF_SUFFIX]
            .iter()
            .find_map(|s| key.strip_suffix(s))
            .unwrap_or(key);
        if !(schema.variables.contains_key(base) && wanted(base)) {
            warnings.push(key.clone());
        }
    }
    if !warnings.is_empty() {
        tracing::warn!(keys = ?warnings, "ignoring unknown keys in model reply");
    }
    Ok(ParsedReply { vector, warnings })
}

/// Serializes a vector in the reply key convention (value plus
/// Description / Explanation / Belief Degree companions), schema order.
pub fn to_reply_json(schema: &TemplateSchema, v: &AttributeVector) -> Json {
    let mut obj = Map::new();
    let names = schema
        .names()
        .filter(|n| v.get(n).is_some())
        .map(str::to_owned)
        .collect::<Vec<_>>();
    for name in names {
        let r = v.get(&name).expect("filtered");
        obj.insert(name.clone(), r.value.to_json());
        obj.insert(format!("{name}{DESCRIPTION_SUFFIX}"), Json::from(r.evidence.clone()));
        obj.insert(format!("{name}{EXPLANATION_SUFFIX}"), Json::from(r.explanation.clone()));
        obj.insert(format!("{name}{BELIEF_SUFFIX}"), Json::from(r.belief));
    }
    Json::Object(obj)
}
