//! Declarative interdependence constraints over attribute vectors.
//!
//! A constraint names the variable values that cannot hold together. The
//! checker reports breaches as [`Violation`]s and never edits records.
//! Predicates on a variable holding a special value (or no value at all) are
//! vacuous: they neither hold nor fail, so a constraint touching them never
//! fires. [`Test::IsSpecial`] is the exception and inspects special values
//! directly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::schema::{is_special_value, AttributeVector, TemplateSchema, Value, NUMERIC_TOLERANCE};

pub const DEFAULT_CONSTRAINTS: &str = include_str!("../assets/constraints/crc_default.json");

#[derive(Debug, thiserror::Error)]
pub enum ConstraintError {
    #[error("malformed constraints file: {0}")]
    Malformed(String),
    #[error("constraint `{constraint}` refers to unknown variable `{var}`")]
    UnknownVariable { constraint: String, var: String },
    #[error("constraint `{constraint}`: {message}")]
    InvalidPredicate { constraint: String, message: String },
    #[error("duplicate constraint id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn holds(self, x: f64, threshold: f64) -> bool {
        match self {
            CmpOp::Eq => (x - threshold).abs() <= NUMERIC_TOLERANCE,
            CmpOp::Lt => x < threshold,
            CmpOp::Le => x <= threshold + NUMERIC_TOLERANCE,
            CmpOp::Gt => x > threshold + NUMERIC_TOLERANCE,
            CmpOp::Ge => x >= threshold - NUMERIC_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case")]
pub enum Test {
    Equals { value: String },
    In { values: Vec<String> },
    Numeric { op: CmpOp, threshold: f64 },
    IsSpecial { value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub var: String,
    #[serde(flatten)]
    pub test: Test,
    /// Inverts a non-vacuous outcome.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negate: bool,
}

impl Predicate {
    pub fn equals(var: impl Into<String>, value: impl Into<String>) -> Self {
        Predicate {
            var: var.into(),
            test: Test::Equals { value: value.into() },
            negate: false,
        }
    }

    pub fn one_of<I, S>(var: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Predicate {
            var: var.into(),
            test: Test::In {
                values: values.into_iter().map(Into::into).collect(),
            },
            negate: false,
        }
    }

    pub fn numeric(var: impl Into<String>, op: CmpOp, threshold: f64) -> Self {
        Predicate {
            var: var.into(),
            test: Test::Numeric { op, threshold },
            negate: false,
        }
    }

    pub fn is_special(var: impl Into<String>, value: impl Into<String>) -> Self {
        Predicate {
            var: var.into(),
            test: Test::IsSpecial { value: value.into() },
            negate: false,
        }
    }

    pub fn negated(mut self) -> Self {
        self.negate = !self.negate;
        self
    }

    /// `Some(holds)`, or `None` when the variable is absent or holds a
    /// special value the test does not inspect.
    pub fn evaluate(&self, v: &AttributeVector) -> Option<bool> {
        let value = v.value(&self.var)?;
        let raw = match &self.test {
            Test::IsSpecial { value: expected } => {
                matches!(value, Value::Text(s) if s.trim() == expected)
            }
            _ if value.is_special() => return None,
            Test::Equals { value: expected } => match value {
                Value::Text(s) => s.trim() == expected,
                Value::Number(_) => false,
            },
            Test::In { values } => match value {
                Value::Text(s) => values.iter().any(|x| x == s.trim()),
                Value::Number(_) => false,
            },
            Test::Numeric { op, threshold } => op.holds(value.as_number()?, *threshold),
        };
        Some(raw != self.negate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// All premises hold ⇒ every conclusion holds. Each conclusion is
    /// judged on its own, so a vacuous one is skipped.
    Implication,
    /// The predicates cannot all hold together.
    MutualExclusion,
    /// A categorical premise ⇒ a numeric comparison.
    NumericLink,
}

fn one_or_many<'de, D>(d: D) -> Result<Vec<Predicate>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Predicate),
        Many(Vec<Predicate>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(p) => vec![p],
        OneOrMany::Many(v) => v,
    })
}

fn serialize_conclusion<S: serde::Serializer>(v: &[Predicate], s: S) -> Result<S::Ok, S::Error> {
    if v.len() == 1 {
        v[0].serialize(s)
    } else {
        v.serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub premises: Vec<Predicate>,
    /// Conjunction; a single predicate may be written without the array.
    #[serde(
        default,
        deserialize_with = "one_or_many",
        serialize_with = "serialize_conclusion",
        skip_serializing_if = "Vec::is_empty"
    )]
    pub conclusion: Vec<Predicate>,
    /// Members of a mutual exclusion.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<Predicate>,
    #[serde(default)]
    pub message: String,
}

impl Constraint {
    pub fn implication(
        id: impl Into<String>,
        premises: Vec<Predicate>,
        conclusion: Vec<Predicate>,
        message: impl Into<String>,
    ) -> Self {
        Constraint {
            id: id.into(),
            kind: ConstraintKind::Implication,
            premises,
            conclusion,
            predicates: Vec::new(),
            message: message.into(),
        }
    }

    pub fn numeric_link(
        id: impl Into<String>,
        premise: Predicate,
        conclusion: Predicate,
        message: impl Into<String>,
    ) -> Self {
        Constraint {
            kind: ConstraintKind::NumericLink,
            ..Self::implication(id, vec![premise], vec![conclusion], message)
        }
    }

    pub fn mutual_exclusion(
        id: impl Into<String>,
        predicates: Vec<Predicate>,
        message: impl Into<String>,
    ) -> Self {
        Constraint {
            id: id.into(),
            kind: ConstraintKind::MutualExclusion,
            premises: Vec::new(),
            conclusion: Vec::new(),
            predicates,
            message: message.into(),
        }
    }

    pub fn all_predicates(&self) -> impl Iterator<Item = &Predicate> {
        self.premises
            .iter()
            .chain(&self.conclusion)
            .chain(&self.predicates)
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.all_predicates().map(|p| p.var.clone()).collect()
    }

    /// Whether the constraint is breached by `v`.
    pub fn fires(&self, v: &AttributeVector) -> bool {
        match self.kind {
            ConstraintKind::MutualExclusion => self
                .predicates
                .iter()
                .all(|p| p.evaluate(v) == Some(true)),
            ConstraintKind::Implication | ConstraintKind::NumericLink => {
                let outcomes: Vec<Option<bool>> =
                    self.conclusion.iter().map(|p| p.evaluate(v)).collect();
                self.premises.iter().all(|p| p.evaluate(v) == Some(true))
                    && outcomes.contains(&Some(false))
            }
        }
    }

    fn validate(&self, schema: &TemplateSchema) -> Result<(), ConstraintError> {
        let invalid = |message: String| ConstraintError::InvalidPredicate {
            constraint: self.id.clone(),
            message,
        };
        match self.kind {
            ConstraintKind::MutualExclusion => {
                if self.predicates.is_empty() {
                    return Err(invalid("mutual exclusion needs predicates".into()));
                }
            }
            ConstraintKind::Implication | ConstraintKind::NumericLink => {
                if self.premises.is_empty() || self.conclusion.is_empty() {
                    return Err(invalid("needs premises and a conclusion".into()));
                }
            }
        }
        for p in self.all_predicates() {
            let spec = schema
                .variables
                .get(&p.var)
                .ok_or_else(|| ConstraintError::UnknownVariable {
                    constraint: self.id.clone(),
                    var: p.var.clone(),
                })?;
            let known = |value: &str| {
                spec.standard_values.iter().any(|s| s == value) || spec.permits_special(value)
            };
            match &p.test {
                Test::Numeric { threshold, .. } => {
                    if !spec.is_numeric() {
                        return Err(invalid(format!("numeric test on categorical `{}`", p.var)));
                    }
                    if !threshold.is_finite() {
                        return Err(invalid("threshold must be finite".into()));
                    }
                }
                Test::Equals { value } if !known(value) => {
                    return Err(invalid(format!("`{value}` is not a value of `{}`", p.var)))
                }
                Test::In { values } => {
                    if values.is_empty() {
                        return Err(invalid(format!("empty value set for `{}`", p.var)));
                    }
                    if let Some(bad) = values.iter().find(|x| !known(x)) {
                        return Err(invalid(format!("`{bad}` is not a value of `{}`", p.var)));
                    }
                }
                Test::IsSpecial { value } if !is_special_value(value) => {
                    return Err(invalid(format!("`{value}` is not a special value")))
                }
                _ => {}
            }
        }
        if self.kind == ConstraintKind::NumericLink {
            if self.premises.iter().any(|p| matches!(p.test, Test::Numeric { .. })) {
                return Err(invalid("numeric link premises must be categorical".into()));
            }
            if self.conclusion.iter().any(|p| !matches!(p.test, Test::Numeric { .. })) {
                return Err(invalid("numeric link conclusion must be a numeric comparison".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>, schema: &TemplateSchema) -> Result<Self, ConstraintError> {
        let mut ids = BTreeSet::new();
        for c in &constraints {
            if !ids.insert(c.id.as_str()) {
                return Err(ConstraintError::DuplicateId(c.id.clone()));
            }
            c.validate(schema)?;
        }
        Ok(ConstraintSet { constraints })
    }

    /// Reads a JSON array of constraint objects and validates it against
    /// `schema`.
    pub fn load(source: impl std::io::Read, schema: &TemplateSchema) -> Result<Self, ConstraintError> {
        let constraints: Vec<Constraint> =
            serde_json::from_reader(source).map_err(|e| ConstraintError::Malformed(e.to_string()))?;
        Self::new(constraints, schema)
    }

    /// The bundled colorectal set: margin/distance link, rectum
    /// applicability, and negative-margin/zero-distance exclusion.
    pub fn crc_default(schema: &TemplateSchema) -> Result<Self, ConstraintError> {
        Self::load(DEFAULT_CONSTRAINTS.as_bytes(), schema)
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.constraints).expect("constraints serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint_id: String,
    pub variables: Vec<String>,
    /// Values of the implicated variables at detection time.
    pub witness: Vec<(String, Option<Value>)>,
    pub case_id: String,
    pub round: u32,
    pub message: String,
}

/// Violations of `v`, in constraint declaration order.
pub fn check(v: &AttributeVector, constraints: &ConstraintSet) -> Vec<Violation> {
    check_case(v, constraints, "", 0)
}

pub fn check_case(
    v: &AttributeVector,
    constraints: &ConstraintSet,
    case_id: &str,
    round: u32,
) -> Vec<Violation> {
    constraints
        .constraints
        .iter()
        .filter(|c| c.fires(v))
        .map(|c| {
            let variables: Vec<String> = c.variables().into_iter().collect();
            Violation {
                constraint_id: c.id.clone(),
                witness: variables
                    .iter()
                    .map(|var| (var.clone(), v.value(var).cloned()))
                    .collect(),
                variables,
                case_id: case_id.to_owned(),
                round,
                message: c.message.clone(),
            }
        })
        .collect()
}

/// Total violations over every case of `store`, one entry per stored round.
pub fn count_violations(
    store: &crate::schema::RecordStore,
    constraints: &ConstraintSet,
) -> Vec<(u32, usize)> {
    let rounds = store
        .case_ids()
        .filter_map(|c| store.round_count(c).ok())
        .max()
        .unwrap_or(0);
    (0..rounds)
        .map(|r| {
            let total = store
                .case_ids()
                .filter_map(|c| store.get(c, r).ok())
                .map(|v| check(v, constraints).len())
                .sum();
            (r, total)
        })
        .collect()
}
