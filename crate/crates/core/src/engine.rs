//! The one-by-one baseline pass and the reflective revision loop.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, CallTag};
use crate::knowledge::{retrieve, within_budget, KnowledgeBase, Scorer, Section, TermOverlap, DEFAULT_CHAR_BUDGET, DEFAULT_RETRIEVAL_K};
use crate::prompt::{parse_model_json, render_knowledge, render_one_by_one, render_reflection, ParseMode, PromptError, PromptSet};
use crate::schema::{diff_vectors, AttributeRecord, AttributeVector, CaseInput, RecordFlag, RecordStore, SchemaError, TemplateSchema, Value};

pub const DEFAULT_MAX_ROUNDS: u32 = 16;
pub const DEFAULT_BACK_VIEW: u32 = 2;
pub const DEFAULT_MAX_PERIOD: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn default_max_rounds() -> u32 {
    DEFAULT_MAX_ROUNDS
}
fn default_back_view() -> u32 {
    DEFAULT_BACK_VIEW
}
fn default_retrieval_k() -> usize {
    DEFAULT_RETRIEVAL_K
}
fn default_char_budget() -> usize {
    DEFAULT_CHAR_BUDGET
}
fn default_concurrency() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionConfig {
    /// Maximum number of reflection rounds.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    /// How many previous estimations each reflection prompt shows.
    #[serde(default = "default_back_view")]
    pub back_view: u32,
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    #[serde(default = "default_char_budget")]
    pub char_budget: usize,
    /// Cases processed in parallel within a round.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        ReflectionConfig {
            max_rounds: DEFAULT_MAX_ROUNDS,
            back_view: DEFAULT_BACK_VIEW,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            char_budget: DEFAULT_CHAR_BUDGET,
            concurrency: 1,
        }
    }
}

impl ReflectionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_rounds == 0 {
            return Err(EngineError::Config("max_rounds must be >= 1".into()));
        }
        if self.back_view == 0 {
            return Err(EngineError::Config("back_view must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(EngineError::Config("concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

/// A case-level problem that did not stop the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub round: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Baseline {
    pub store: RecordStore,
    pub call_log: Vec<CallTag>,
    pub failures: Vec<CaseFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ConvergedAll,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionTrace {
    pub store: RecordStore,
    /// Entry `k - 1` counts the cases revised in round `k`.
    pub revised_per_round: Vec<usize>,
    pub terminated: Termination,
    pub call_log: Vec<CallTag>,
    pub failures: Vec<CaseFailure>,
    /// Calls whose backend returned an error, as opposed to an unusable reply.
    pub backend_failures: usize,
}

impl ReflectionTrace {
    pub fn rounds_executed(&self) -> u32 {
        self.revised_per_round.len() as u32
    }

    /// Summary of the run without the record store.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rounds_executed": self.rounds_executed(),
            "revised_per_round": self.revised_per_round,
            "terminated": self.terminated,
            "call_log": self.call_log,
            "failures": self.failures,
            "backend_failures": self.backend_failures,
        })
    }
}

/// Applies `f` to each item on up to `workers` threads. Output order
/// matches input order whatever the scheduling.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let parts: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut got = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break got;
                        }
                        got.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, r) in parts.into_iter().flatten() {
        out[i] = Some(r);
    }
    out.into_iter().map(|r| r.expect("every index visited")).collect()
}

fn knowledge_for(kb: &KnowledgeBase, query: &str, k: usize, budget: usize, scorer: &dyn Scorer) -> Vec<Section> {
    if k == 0 || kb.is_empty() {
        return Vec::new();
    }
    within_budget(&retrieve(kb, query, k, scorer), budget)
}

struct CaseBaseline {
    vector: Option<AttributeVector>,
    calls: Vec<CallTag>,
    failures: Vec<CaseFailure>,
}

/// Round 0: one call per (case, variable) with the one-by-one prompt.
///
/// A reply that cannot be parsed stores "Cannot be determined" with a
/// [`RecordFlag::ParseFailure`] flag. A backend error drops the case from
/// the store and records it in `failures`.
pub fn run_one_by_one(
    backend: &dyn Backend,
    kb: &KnowledgeBase,
    schema: &TemplateSchema,
    cases: &[CaseInput],
    prompts: &PromptSet,
    config: &ReflectionConfig,
) -> Result<Baseline, EngineError> {
    if schema.is_empty() {
        return Err(EngineError::Config("template has no variables".into()));
    }
    config.validate()?;
    let scorer = TermOverlap;
    // Knowledge depends only on the variable, so retrieve it once.
    let per_var: Vec<(String, Vec<String>, String)> = schema
        .variables
        .values()
        .map(|spec| {
            let values = spec.prompt_values();
            let query = format!("{} {}", spec.name, values.join(" "));
            let sections = knowledge_for(kb, &query, config.retrieval_k, config.char_budget, &scorer);
            let block = if sections.is_empty() {
                String::new()
            } else {
                format!("\n\nRelevant knowledge:\n{}", render_knowledge(&sections))
            };
            (spec.name.clone(), values, block)
        })
        .collect();

    let results = par_map(cases, config.concurrency, |case| -> Result<CaseBaseline, EngineError> {
        let mut vector = AttributeVector::new();
        let mut calls = Vec::new();
        let mut failures = Vec::new();
        for (var, values, block) in &per_var {
            let gross = format!("{}{block}", case.text);
            let prompt = render_one_by_one(&prompts.one_by_one, var, values, &gross)?;
            let tag = CallTag::one_by_one(&case.id, var);
            calls.push(tag.clone());
            let reply = match backend.complete(&prompt, &tag) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(CaseFailure {
                        case_id: case.id.clone(),
                        round: 0,
                        message: format!("{var}: {e}"),
                    });
                    return Ok(CaseBaseline { vector: None, calls, failures });
                }
            };
            match parse_model_json(&reply, schema, ParseMode::SingleVar(var)) {
                Ok(parsed) => vector.assignments.extend(parsed.vector.assignments),
                Err(e) => {
                    tracing::warn!(case = %case.id, %var, error = %e, "unparseable one-by-one reply");
                    vector.insert(
                        var.clone(),
                        AttributeRecord::new("Cannot be determined").flagged(RecordFlag::ParseFailure),
                    );
                }
            }
        }
        Ok(CaseBaseline {
            vector: Some(vector),
            calls,
            failures,
        })
    });

    let mut out = Baseline::default();
    for (case, r) in cases.iter().zip(results) {
        let r = r?;
        out.call_log.extend(r.calls);
        out.failures.extend(r.failures);
        if let Some(v) = r.vector {
            out.store.push_round(&case.id, 0, v)?;
        }
    }
    Ok(out)
}

/// Copies `prev` and marks every record with `flag`.
fn carry_over(prev: &AttributeVector, flag: RecordFlag) -> AttributeVector {
    let mut v = prev.clone();
    for r in v.assignments.values_mut() {
        r.flags.insert(flag);
    }
    v
}

/// Keeps variables the reply omitted at their previous values.
fn complete_from(mut next: AttributeVector, prev: &AttributeVector) -> AttributeVector {
    for (name, r) in &prev.assignments {
        if next.get(name).is_none() {
            next.insert(name.clone(), r.clone());
        }
    }
    next
}

/// The reflective loop over every case that has a round-0 vector.
///
/// Each round is a barrier: all unconverged cases are queried (in parallel
/// up to `config.concurrency`), then results are applied in case order. A
/// case whose new vector equals its previous one converges at that round
/// and is filled forward afterwards without further calls. The loop stops
/// after `max_rounds` or after the first round that revises no case.
pub fn run_reflection(
    backend: &dyn Backend,
    config: &ReflectionConfig,
    schema: &TemplateSchema,
    kb: &KnowledgeBase,
    cases: &[CaseInput],
    prompts: &PromptSet,
    mut store: RecordStore,
) -> Result<ReflectionTrace, EngineError> {
    config.validate()?;
    let scorer = TermOverlap;
    let mut failures = Vec::new();
    let mut backend_failures = 0;
    let active: Vec<&CaseInput> = cases
        .iter()
        .filter(|c| {
            let ok = store.get(&c.id, 0).is_ok();
            if !ok {
                failures.push(CaseFailure {
                    case_id: c.id.clone(),
                    round: 0,
                    message: "no round-0 vector; skipped".into(),
                });
            }
            ok
        })
        .collect();
    let knowledge: Vec<Vec<Section>> = active
        .iter()
        .map(|c| {
            let query: String = c.text.chars().take(config.char_budget).collect();
            knowledge_for(kb, &query, config.retrieval_k, config.char_budget, &scorer)
        })
        .collect();

    let mut revised_per_round = Vec::new();
    let mut call_log = Vec::new();
    let mut terminated = Termination::MaxRounds;

    for k in 1..=config.max_rounds {
        let mut work = Vec::new();
        for (i, case) in active.iter().enumerate() {
            if store.converged_at(&case.id)? == 0 {
                work.push(i);
            } else {
                store.fill_forward(&case.id, k)?;
            }
        }
        let replies = par_map(&work, config.concurrency, |&i| -> Result<_, EngineError> {
            let case = active[i];
            let window = store.last_rounds(&case.id, config.back_view as usize)?;
            let prompt = render_reflection(
                &prompts.reflection,
                &case.text,
                &knowledge[i],
                schema,
                &window,
                &prompts.inconsistency_examples,
            )?;
            let tag = CallTag::reflection(&case.id, k);
            Ok((tag.clone(), backend.complete(&prompt, &tag)))
        });

        let mut revised = 0;
        for (&i, reply) in work.iter().zip(replies) {
            let case = active[i];
            let (tag, reply) = reply?;
            call_log.push(tag);
            let prev = store.get(&case.id, k - 1)?.clone();
            let next = match reply {
                Ok(text) => match parse_model_json(&text, schema, ParseMode::AllVars) {
                    Ok(p) if !p.vector.is_empty() => complete_from(p.vector, &prev),
                    Ok(_) => fail(&mut failures, case, k, "reply had no template variables", &prev, RecordFlag::ParseFailure),
                    Err(e) => fail(&mut failures, case, k, &e.to_string(), &prev, RecordFlag::ParseFailure),
                },
                Err(e) => {
                    backend_failures += 1;
                    fail(&mut failures, case, k, &describe_backend_error(&e), &prev, RecordFlag::BackendFailure)
                }
            };
            let changed = !diff_vectors(&next, &prev).is_empty();
            store.push_round(&case.id, k, next)?;
            if changed {
                revised += 1;
            } else {
                store.set_converged(&case.id, k)?;
            }
        }
        revised_per_round.push(revised);
        tracing::info!(round = k, revised, "reflection round finished");
        if revised == 0 {
            terminated = Termination::ConvergedAll;
            break;
        }
    }

    Ok(ReflectionTrace {
        store,
        revised_per_round,
        terminated,
        call_log,
        failures,
        backend_failures,
    })
}

fn describe_backend_error(e: &BackendError) -> String {
    format!("backend: {e}")
}

fn fail(
    failures: &mut Vec<CaseFailure>,
    case: &CaseInput,
    round: u32,
    message: &str,
    prev: &AttributeVector,
    flag: RecordFlag,
) -> AttributeVector {
    tracing::warn!(case = %case.id, round, message, "reflection reply unusable; keeping previous values");
    failures.push(CaseFailure {
        case_id: case.id.clone(),
        round,
        message: message.to_owned(),
    });
    carry_over(prev, flag)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub case: String,
    /// 0 when no cycle of length up to `max_period` explains the tail.
    pub period: usize,
    pub cycling_variables: BTreeSet<String>,
    /// Distinct value assignments in one period, in visiting order.
    pub states: Vec<AttributeVector>,
}

impl CycleReport {
    pub fn to_json(&self) -> serde_json::Value {
        let states: Vec<serde_json::Value> = self
            .states
            .iter()
            .map(|v| {
                v.assignments
                    .iter()
                    .map(|(k, r)| (k.clone(), r.value.to_json()))
                    .collect::<serde_json::Map<_, _>>()
                    .into()
            })
            .collect();
        serde_json::json!({
            "case": self.case,
            "period": self.period,
            "cycling_variables": self.cycling_variables,
            "states": states,
        })
    }
}

/// Smallest period `q <= max_period` such that the last `2q` rounds of the
/// case satisfy `v[k] == v[k - q]`.
pub fn detect_cycles(store: &RecordStore, case: &str, max_period: usize) -> Result<CycleReport, SchemaError> {
    let rounds: Vec<AttributeVector> = store
        .history(case)?
        .rounds
        .iter()
        .map(AttributeVector::values_only)
        .collect();
    let n = rounds.len();
    let mut report = CycleReport {
        case: case.to_owned(),
        period: 0,
        cycling_variables: BTreeSet::new(),
        states: Vec::new(),
    };
    if n < 2 {
        return Ok(report);
    }
    let same = |a: usize, b: usize| diff_vectors(&rounds[a], &rounds[b]).is_empty();
    let Some(q) = (1..=max_period)
        .filter(|q| 2 * q <= n)
        .find(|&q| (n - q..n).all(|i| same(i, i - q)))
    else {
        return Ok(report);
    };
    report.period = q;
    let cycle = &rounds[n - q..];
    for (i, v) in cycle.iter().enumerate() {
        let w = &cycle[(i + 1) % q];
        report.cycling_variables.extend(diff_vectors(v, w));
        if !report.states.iter().any(|s| diff_vectors(s, v).is_empty()) {
            report.states.push(v.clone());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub round: u32,
    pub cases_revised: usize,
    pub fraction_converged: f64,
}

/// One point per executed round.
pub fn convergence_curve(trace: &ReflectionTrace) -> Vec<CurvePoint> {
    let total = trace.store.len();
    let converged: Vec<u32> = trace
        .store
        .case_ids()
        .map(|c| trace.store.converged_at(c).unwrap_or(0))
        .collect();
    trace
        .revised_per_round
        .iter()
        .enumerate()
        .map(|(i, &revised)| {
            let round = i as u32 + 1;
            let done = converged.iter().filter(|&&c| c > 0 && c <= round).count();
            CurvePoint {
                round,
                cases_revised: revised,
                fraction_converged: if total == 0 { 0.0 } else { done as f64 / total as f64 },
            }
        })
        .collect()
}

/// Value-only vector from `(variable, value)` pairs.
pub fn vector_of<I, K, V>(pairs: I) -> AttributeVector
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Value>,
{
    pairs
        .into_iter()
        .fold(AttributeVector::new(), |v, (k, x)| v.with_value(k, x))
}
