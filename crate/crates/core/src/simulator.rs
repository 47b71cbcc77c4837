//! A deterministic stand-in for a reasoning model.
//!
//! Round 0 answers are the ground truth with a seeded error rate. Reflection
//! replies read the latest estimation back out of the prompt and repair at
//! most one constraint violation, preferring the true value. The resulting
//! trajectories are monotone in violation count, which makes the simulator
//! useful for exercising the engine end to end without a network.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendError, CallMode, CallTag};
use crate::constraints::{check, Constraint, ConstraintKind, ConstraintSet, Predicate, Test};
use crate::prompt::{extract_first_object, parse_model_json, to_reply_json, ParseMode, RenderedPrompt, ROUND_LABEL};
use crate::schema::{AttributeRecord, AttributeVector, CaseInput, TemplateSchema, Value, VariableSpec};

pub const DEFAULT_ACCURACY: f64 = 0.8;

/// RNG keyed by a seed and a list of labels.
pub fn keyed_rng(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update([0x1f]);
        h.update(l.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone)]
pub struct RepairSimulator {
    schema: TemplateSchema,
    constraints: ConstraintSet,
    seed: u64,
    accuracy: f64,
    truths: BTreeMap<String, AttributeVector>,
}

impl RepairSimulator {
    pub fn new(schema: TemplateSchema, constraints: ConstraintSet, seed: u64) -> Self {
        RepairSimulator {
            schema,
            constraints,
            seed,
            accuracy: DEFAULT_ACCURACY,
            truths: BTreeMap::new(),
        }
    }

    pub fn with_truths(mut self, truths: BTreeMap<String, AttributeVector>) -> Self {
        self.truths = truths;
        self
    }

    /// Probability that a round-0 answer is correct.
    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy = accuracy.clamp(0.0, 1.0);
        self
    }

    /// The truth for a case: the supplied one, or a seeded consistent draw.
    pub fn truth(&self, case_id: &str) -> AttributeVector {
        self.truths
            .get(case_id)
            .cloned()
            .unwrap_or_else(|| synthetic_truth(&self.schema, &self.constraints, self.seed, case_id))
    }

    fn first_pass(&self, case_id: &str, var: &str) -> Result<String, BackendError> {
        let spec = self
            .schema
            .variables
            .get(var)
            .ok_or_else(|| BackendError::InvalidResponse(format!("unknown variable {var}")))?;
        let truth = self.truth(case_id);
        let true_value = truth
            .value(var)
            .cloned()
            .unwrap_or_else(|| Value::text("Cannot be determined"));
        let mut rng = keyed_rng(self.seed, &["answer", case_id, var]);
        let value = if rng.gen_bool(self.accuracy) {
            true_value
        } else {
            wrong_value(spec, &true_value, &mut rng)
        };
        let v = AttributeVector::new().with(
            var,
            AttributeRecord::new(value)
                .with_belief(0.8)
                .with_explanation("read from the gross description"),
        );
        Ok(format!("```json\n{:#}\n```", to_reply_json(&self.schema, &v)))
    }

    fn reflect(&self, case_id: &str, prompt: &str) -> Result<String, BackendError> {
        let at = prompt
            .rfind(ROUND_LABEL)
            .ok_or_else(|| BackendError::InvalidResponse("prompt has no estimation block".into()))?;
        let tail = &prompt[at..];
        extract_first_object(tail).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let parsed = parse_model_json(tail, &self.schema, ParseMode::AllVars)
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let current = parsed.vector.values_only();
        let truth = self.truth(case_id);
        let (next, note) = match repair_step(&self.schema, &self.constraints, &current, Some(&truth)) {
            Some((v, id)) => (v, format!("revised to resolve {id}")),
            None => (current, "consistent with the other estimations".to_owned()),
        };
        let mut out = AttributeVector::new();
        for (name, r) in &next.assignments {
            out.insert(
                name.clone(),
                AttributeRecord::new(r.value.clone())
                    .with_belief(0.9)
                    .with_explanation(note.clone()),
            );
        }
        Ok(format!("{:#}", to_reply_json(&self.schema, &out)))
    }
}

impl Backend for RepairSimulator {
    fn complete(&self, prompt: &RenderedPrompt, tag: &CallTag) -> Result<String, BackendError> {
        match tag.mode {
            CallMode::OneByOne => {
                let var = tag
                    .variable
                    .as_deref()
                    .ok_or_else(|| BackendError::InvalidResponse("one-by-one call without variable".into()))?;
                self.first_pass(&tag.case_id, var)
            }
            CallMode::Reflection => self.reflect(&tag.case_id, &prompt.text),
        }
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "kind": "repair_simulator",
            "seed": self.seed,
            "accuracy": self.accuracy,
            "truths": self.truths.len(),
        })
    }
}

fn wrong_value(spec: &VariableSpec, truth: &Value, rng: &mut ChaCha8Rng) -> Value {
    if spec.is_numeric() {
        let base = truth.as_number().unwrap_or(0.0);
        if base != 0.0 && rng.gen_bool(0.5) {
            return Value::Number(0.0);
        }
        return Value::Number(round1(base + rng.gen_range(1..=20) as f64 / 10.0));
    }
    let options: Vec<&String> = spec
        .declared_values
        .iter()
        .filter(|v| !truth.value_eq(&Value::text(v.as_str())) && v.as_str() != "Cannot be determined")
        .collect();
    match options.choose(rng) {
        Some(v) => Value::text(v.as_str()),
        None => truth.clone(),
    }
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Values worth trying for `pred`'s variable, truth first.
fn candidates(spec: &VariableSpec, pred: &Predicate, truth: Option<&Value>) -> Vec<Value> {
    let mut out: Vec<Value> = truth.cloned().into_iter().collect();
    if spec.is_numeric() {
        let t = match &pred.test {
            Test::Numeric { threshold, .. } => *threshold,
            _ => 0.0,
        };
        for x in [t, t + 1.0, t - 1.0, 0.0, 1.0] {
            if !(spec.is_length() && x < 0.0) {
                out.push(Value::Number(x));
            }
        }
    } else {
        out.extend(spec.declared_values.iter().map(|s| Value::text(s.as_str())));
    }
    out.extend(spec.special_values.iter().map(|s| Value::text(s.as_str())));
    out
}

/// A value for `pred.var` making `pred` evaluate to `target`.
fn pick(
    schema: &TemplateSchema,
    pred: &Predicate,
    target: bool,
    truth: Option<&AttributeVector>,
) -> Option<Value> {
    let spec = schema.variables.get(&pred.var)?;
    let tv = truth.and_then(|t| t.value(&pred.var));
    candidates(spec, pred, tv).into_iter().find(|c| {
        let probe = AttributeVector::new().with_value(pred.var.clone(), c.clone());
        pred.evaluate(&probe) == Some(target)
    })
}

/// Candidate edits that would silence `c` on `v`, in preference order.
fn repairs(
    schema: &TemplateSchema,
    c: &Constraint,
    v: &AttributeVector,
    truth: Option<&AttributeVector>,
) -> Vec<Vec<(String, Value)>> {
    let mut out = Vec::new();
    match c.kind {
        ConstraintKind::Implication | ConstraintKind::NumericLink => {
            let fix: Option<Vec<_>> = c
                .conclusion
                .iter()
                .filter(|p| p.evaluate(v) == Some(false))
                .map(|p| pick(schema, p, true, truth).map(|x| (p.var.clone(), x)))
                .collect();
            out.extend(fix.filter(|f| !f.is_empty()));
            for p in &c.premises {
                if let Some(x) = pick(schema, p, false, truth) {
                    out.push(vec![(p.var.clone(), x)]);
                }
            }
        }
        ConstraintKind::MutualExclusion => {
            for p in &c.predicates {
                if let Some(x) = pick(schema, p, false, truth) {
                    out.push(vec![(p.var.clone(), x)]);
                }
            }
        }
    }
    if let Some(t) = truth {
        // Edits that land on the truth go first; the sort is stable.
        out.sort_by_key(|edit| {
            !edit
                .iter()
                .all(|(var, x)| t.value(var).is_some_and(|tv| tv.value_eq(x)))
        });
    }
    out
}

/// Repairs the violated constraint with the lowest id, using the first edit
/// that strictly lowers the violation count. Falls through to the next id
/// when no edit helps. Returns the edited vector and the constraint id.
pub fn repair_step(
    schema: &TemplateSchema,
    constraints: &ConstraintSet,
    v: &AttributeVector,
    truth: Option<&AttributeVector>,
) -> Option<(AttributeVector, String)> {
    let before = check(v, constraints).len();
    let mut firing: Vec<&Constraint> = constraints.constraints.iter().filter(|c| c.fires(v)).collect();
    firing.sort_by(|a, b| a.id.cmp(&b.id));
    for c in firing {
        for edit in repairs(schema, c, v, truth) {
            let mut next = v.clone();
            for (var, x) in edit {
                next.insert(var, AttributeRecord::new(x));
            }
            if check(&next, constraints).len() < before {
                return Some((next, c.id.clone()));
            }
        }
    }
    None
}

/// A seeded truth vector for `case_id` satisfying every constraint.
pub fn synthetic_truth(
    schema: &TemplateSchema,
    constraints: &ConstraintSet,
    seed: u64,
    case_id: &str,
) -> AttributeVector {
    let mut rng = keyed_rng(seed, &["truth", case_id]);
    let mut v = AttributeVector::new();
    for spec in schema.variables.values() {
        let value = if spec.is_numeric() {
            Value::Number(rng.gen_range(1..=80) as f64 / 10.0)
        } else {
            let pool = if spec.standard_values.is_empty() {
                &spec.declared_values
            } else {
                &spec.standard_values
            };
            match pool.choose(&mut rng) {
                Some(s) => Value::text(s.as_str()),
                None => Value::text("Not specified"),
            }
        };
        v.insert(spec.name.clone(), AttributeRecord::new(value));
    }
    while let Some((next, _)) = repair_step(schema, constraints, &v, None) {
        v = next;
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub input: CaseInput,
    pub truth: AttributeVector,
}

/// `n` cases with ids `S0001..`, a gross description listing every true
/// value, and the truth itself.
pub fn synthesize_cases(
    schema: &TemplateSchema,
    constraints: &ConstraintSet,
    n: usize,
    seed: u64,
) -> Vec<SyntheticCase> {
    (1..=n)
        .map(|i| {
            let id = format!("S{i:04}");
            let truth = synthetic_truth(schema, constraints, seed, &id);
            let mut text = format!("Gross description for specimen {id}.");
            for (name, r) in schema.names().filter_map(|n| truth.get(n).map(|r| (n, r))) {
                text.push_str(&format!(" {name}: {}.", r.value));
            }
            SyntheticCase {
                input: CaseInput::new(id, text),
                truth,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{render_reflection, PromptSet};
    use crate::schema::diff_vectors;

    fn demo() -> (TemplateSchema, ConstraintSet) {
        let schema = TemplateSchema::from_json_str(include_str!("../assets/templates/crc_demo.json")).unwrap();
        let set = ConstraintSet::crc_default(&schema).unwrap();
        (schema, set)
    }

    #[test]
    fn synthetic_truths_are_consistent_and_stable() {
        let (schema, set) = demo();
        let cases = synthesize_cases(&schema, &set, 40, 7);
        for c in &cases {
            assert!(check(&c.truth, &set).is_empty(), "{}", c.input.id);
            assert_eq!(c.truth.len(), schema.len());
        }
        assert_eq!(cases, synthesize_cases(&schema, &set, 40, 7));
        assert_ne!(cases, synthesize_cases(&schema, &set, 40, 8));
    }

    #[test]
    fn first_pass_is_deterministic() {
        let (schema, set) = demo();
        let sim = RepairSimulator::new(schema, set, 3);
        let p = RenderedPrompt {
            kind: crate::prompt::PromptKind::OneByOne,
            text: String::new(),
            slots: Default::default(),
        };
        let tag = CallTag::one_by_one("S0001", "Tumor Site");
        assert_eq!(sim.complete(&p, &tag).unwrap(), sim.complete(&p, &tag).unwrap());
    }

    #[test]
    fn reflection_repairs_margin_triple() {
        let (schema, set) = demo();
        let v = AttributeVector::new()
            .with_value("Margin Status for Invasive Carcinoma", "All margins negative for invasive carcinoma")
            .with_value("Distance of Tumor from Closest Margin (cm)", 0.0)
            .with_value("Tumor Site", "Rectum");
        assert_eq!(check(&v, &set).len(), 1);
        let sim = RepairSimulator::new(schema.clone(), set.clone(), 1);
        let prompts = PromptSet::default();
        let p = render_reflection(&prompts.reflection, "text", &[], &schema, &[(0, &v)], &prompts.inconsistency_examples)
            .unwrap();
        let reply = sim.complete(&p, &CallTag::reflection("X", 1)).unwrap();
        let next = parse_model_json(&reply, &schema, ParseMode::AllVars).unwrap().vector;
        assert!(check(&next, &set).is_empty());
        assert_eq!(diff_vectors(&v, &next).len(), 1);
        // A consistent estimation is echoed.
        let p2 = render_reflection(&prompts.reflection, "text", &[], &schema, &[(1, &next)], &prompts.inconsistency_examples)
            .unwrap();
        let again = parse_model_json(&sim.complete(&p2, &CallTag::reflection("X", 2)).unwrap(), &schema, ParseMode::AllVars)
            .unwrap()
            .vector;
        assert!(diff_vectors(&next.values_only(), &again.values_only()).is_empty());
    }

    #[test]
    fn two_violations_fix_lowest_id_only() {
        let (schema, set) = demo();
        let v = AttributeVector::new()
            .with_value("Margin Status for Invasive Carcinoma", "Invasive carcinoma present at margin")
            .with_value("Distance of Tumor from Closest Margin (cm)", 0.3)
            .with_value("Tumor Site", "Cecum")
            .with_value("Rectal Tumor Location", "Lower third")
            .with_value("Macroscopic Evaluation of Mesorectum", "Not applicable");
        let ids: Vec<_> = check(&v, &set).into_iter().map(|x| x.constraint_id).collect();
        assert_eq!(ids.len(), 2);
        let (next, fixed) = repair_step(&schema, &set, &v, None).unwrap();
        assert_eq!(fixed, "margin-distance-link");
        let left: Vec<_> = check(&next, &set).into_iter().map(|x| x.constraint_id).collect();
        assert_eq!(left, vec!["rectum-applicability".to_owned()]);
        assert_eq!(diff_vectors(&v, &next).len(), 1);
    }
}
