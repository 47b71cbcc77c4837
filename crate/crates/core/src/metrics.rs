//! Scoring extracted values against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{diff_vectors, is_special_value, AttributeVector, RecordStore, TemplateSchema, Value, NUMERIC_TOLERANCE};

/// Prediction bucket for values outside the class list.
pub const UNMATCHED: &str = "<unmatched>";
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;
pub const DEFAULT_BOOTSTRAP_REPS: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction and truth lists differ in length ({preds} vs {truths})")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("label {0:?} is not a known class")]
    UnknownLabel(String),
    #[error("merge map chains {0:?} -> {1:?} -> {2:?}")]
    ChainedMerge(String, String, String),
    #[error("round {0} was not executed")]
    UnknownRound(u32),
    #[error("invalid count: {correct} correct of {n}")]
    InvalidCount { correct: u64, n: u64 },
    #[error("truths line {line}: {message}")]
    TruthsFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[truth][prediction]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.len() == classes.len() && counts.iter().all(|r| r.len() == classes.len()));
        ConfusionMatrix { classes, counts }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }
}

/// Relabels classes before counting, e.g. `Rectosigmoid -> Rectum`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMergeMap {
    mapping: BTreeMap<String, String>,
}

impl ClassMergeMap {
    /// Rejects chains so one application is final.
    pub fn new(mapping: BTreeMap<String, String>) -> Result<Self, MetricsError> {
        for (from, to) in &mapping {
            if let Some(next) = mapping.get(to) {
                if next != to {
                    return Err(MetricsError::ChainedMerge(from.clone(), to.clone(), next.clone()));
                }
            }
        }
        Ok(ClassMergeMap { mapping })
    }

    pub fn pair(from: impl Into<String>, to: impl Into<String>) -> Self {
        ClassMergeMap {
            mapping: BTreeMap::from([(from.into(), to.into())]),
        }
    }

    pub fn apply<'a>(&'a self, label: &'a str) -> &'a str {
        self.mapping.get(label).map(String::as_str).unwrap_or(label)
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}

/// Merged class list with duplicates removed, first occurrence kept.
pub fn merged_classes(classes: &[String], merge: &ClassMergeMap) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in classes {
        let m = merge.apply(c);
        if !out.iter().any(|x| x == m) {
            out.push(m.to_owned());
        }
    }
    out
}

pub fn build_confusion(
    preds: &[String],
    truths: &[String],
    classes: &[String],
    merge: &ClassMergeMap,
) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(merged_classes(classes, merge));
    for (p, t) in preds.iter().zip(truths) {
        let idx = |label: &str| {
            let m = merge.apply(label);
            cm.index_of(m).ok_or_else(|| MetricsError::UnknownLabel(m.to_owned()))
        };
        let (ti, pi) = (idx(t)?, idx(p)?);
        cm.counts[ti][pi] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightedMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Accuracy and support-weighted per-class F1, recall and precision.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<WeightedMetrics, MetricsError> {
    let total = cm.total() as f64;
    if total == 0.0 {
        return Err(MetricsError::Empty);
    }
    let n = cm.classes.len();
    let mut out = WeightedMetrics {
        accuracy: cm.trace() as f64 / total,
        f1: 0.0,
        recall: 0.0,
        precision: 0.0,
    };
    for i in 0..n {
        let tp = cm.counts[i][i] as f64;
        let support = cm.counts[i].iter().sum::<u64>() as f64;
        let predicted = (0..n).map(|r| cm.counts[r][i]).sum::<u64>() as f64;
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = ratio(2.0 * p * r, p + r);
        let w = support / total;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NumericMetrics {
    pub correct_rate: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn numeric_metrics(preds: &[f64], truths: &[f64]) -> Result<NumericMetrics, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = preds.len() as f64;
    let mut correct = 0usize;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        let d = (p - t).abs();
        if d <= NUMERIC_TOLERANCE {
            correct += 1;
        }
        abs += d;
        sq += d * d;
    }
    Ok(NumericMetrics {
        correct_rate: correct as f64 / n,
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CiMethod {
    #[default]
    Wilson,
    Bootstrap { seed: u64, reps: usize },
}

/// 95% interval for a proportion `correct / n`.
pub fn accuracy_ci(correct: u64, n: u64, method: CiMethod) -> Result<(f64, f64), MetricsError> {
    if n == 0 || correct > n {
        return Err(MetricsError::InvalidCount { correct, n });
    }
    let nf = n as f64;
    let p = correct as f64 / nf;
    match method {
        CiMethod::Wilson => {
            let z2 = Z_95 * Z_95;
            let denom = 1.0 + z2 / nf;
            let centre = (p + z2 / (2.0 * nf)) / denom;
            let half = Z_95 / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
            Ok(((centre - half).max(0.0), (centre + half).min(1.0)))
        }
        CiMethod::Bootstrap { seed, reps } => {
            let reps = reps.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut stats: Vec<f64> = (0..reps)
                .map(|_| {
                    let hits = (0..n).filter(|_| rng.gen_range(0..n) < correct).count();
                    hits as f64 / nf
                })
                .collect();
            stats.sort_by(f64::total_cmp);
            let at = |q: f64| stats[((q * reps as f64).ceil() as usize).clamp(1, reps) - 1];
            Ok((at(0.025), at(0.975)))
        }
    }
}

/// One case's reference values. `conflicting` lists variables whose truth
/// is disputed and must not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub case_id: String,
    pub values: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub conflicting: BTreeSet<String>,
}

impl GroundTruth {
    pub fn from_vector(case_id: impl Into<String>, v: &AttributeVector) -> Self {
        GroundTruth {
            case_id: case_id.into(),
            values: v.assignments.iter().map(|(k, r)| (k.clone(), r.value.clone())).collect(),
            conflicting: BTreeSet::new(),
        }
    }
}

pub fn read_truths(reader: impl BufRead) -> Result<Vec<GroundTruth>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: GroundTruth = serde_json::from_str(&line).map_err(|e| MetricsError::TruthsFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_truths(truths: &[GroundTruth], mut out: impl Write) -> Result<(), MetricsError> {
    for t in truths {
        serde_json::to_writer(&mut out, t).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Pairs that survive the exclusion rules for one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluable {
    /// `(case, prediction, truth)`; the prediction is `None` when the case
    /// has no record.
    pub pairs: Vec<(String, Option<Value>, Value)>,
    pub total: usize,
}

impl Evaluable {
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.total as f64
        }
    }
}

/// Drops cases whose truth for `var` is missing, special or disputed.
/// Special predictions against a defined truth stay in and count as wrong.
pub fn apply_exclusions(
    var: &str,
    predictions: &BTreeMap<String, AttributeVector>,
    truths: &[GroundTruth],
) -> Evaluable {
    let pairs = truths
        .iter()
        .filter(|t| !t.conflicting.contains(var))
        .filter_map(|t| {
            let truth = t.values.get(var)?;
            if truth.is_special() {
                return None;
            }
            let pred = predictions.get(&t.case_id).and_then(|v| v.value(var)).cloned();
            Some((t.case_id.clone(), pred, truth.clone()))
        })
        .collect();
    Evaluable {
        pairs,
        total: truths.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableReport {
    Categorical {
        variable: String,
        evaluated: usize,
        coverage: f64,
        metrics: Option<WeightedMetrics>,
        accuracy_ci: Option<(f64, f64)>,
        confusion: Option<ConfusionMatrix>,
    },
    Numeric {
        variable: String,
        evaluated: usize,
        coverage: f64,
        correct_rate: Option<f64>,
        /// Over cases with a numeric prediction.
        mae: Option<f64>,
        rmse: Option<f64>,
        accuracy_ci: Option<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub round: u32,
    pub variables: Vec<VariableReport>,
    /// Mean F1 over categorical variables with at least one scored case.
    pub average_f1: Option<f64>,
    /// Mean correct rate over numeric variables with at least one scored case.
    pub average_correct_rate: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    /// Per-variable class merges.
    pub merges: BTreeMap<String, ClassMergeMap>,
    pub ci: CiMethod,
    pub include_confusion: bool,
}

/// Highest round stored for any case.
pub fn last_round(store: &RecordStore) -> Option<u32> {
    store
        .case_ids()
        .filter_map(|c| store.round_count(c).ok())
        .max()
        .and_then(|n| n.checked_sub(1))
}

/// Each case's vector at `round`; converged cases that stopped early
/// contribute their final vector.
pub fn vectors_at(store: &RecordStore, round: u32) -> Result<BTreeMap<String, AttributeVector>, MetricsError> {
    match last_round(store) {
        Some(last) if round <= last => {}
        _ => return Err(MetricsError::UnknownRound(round)),
    }
    let mut out = BTreeMap::new();
    for case in store.case_ids() {
        let n = store.round_count(case).unwrap_or(0);
        if n == 0 {
            continue;
        }
        let r = round.min(n - 1);
        if r < round && store.converged_at(case).unwrap_or(0) == 0 {
            continue;
        }
        if let Ok(v) = store.get(case, r) {
            out.insert(case.to_owned(), v.clone());
        }
    }
    Ok(out)
}

fn label(v: &Value) -> String {
    v.to_string().trim().to_owned()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scores the round-`round` vectors against `truths`.
pub fn round_report(
    store: &RecordStore,
    schema: &TemplateSchema,
    truths: &[GroundTruth],
    round: u32,
    opts: &ReportOptions,
) -> Result<MetricsReport, MetricsError> {
    let preds = vectors_at(store, round)?;
    let mut variables = Vec::new();
    let (mut f1s, mut rates) = (Vec::new(), Vec::new());
    let no_merge = ClassMergeMap::default();
    for spec in schema.variables.values() {
        let ev = apply_exclusions(&spec.name, &preds, truths);
        let n = ev.pairs.len();
        if spec.is_numeric() {
            let correct = ev
                .pairs
                .iter()
                .filter(|(_, p, t)| p.as_ref().is_some_and(|p| p.value_eq(t)))
                .count();
            let (mut ps, mut ts) = (Vec::new(), Vec::new());
            for (_, p, t) in &ev.pairs {
                if let (Some(p), Some(t)) = (p.as_ref().and_then(Value::as_number), t.as_number()) {
                    ps.push(p);
                    ts.push(t);
                }
            }
            let errors = numeric_metrics(&ps, &ts).ok();
            let rate = (n > 0).then(|| correct as f64 / n as f64);
            rates.extend(rate);
            variables.push(VariableReport::Numeric {
                variable: spec.name.clone(),
                evaluated: n,
                coverage: ev.coverage(),
                correct_rate: rate,
                mae: errors.map(|e| e.mae),
                rmse: errors.map(|e| e.rmse),
                accuracy_ci: accuracy_ci(correct as u64, n as u64, opts.ci).ok(),
            });
        } else {
            let merge = opts.merges.get(&spec.name).unwrap_or(&no_merge);
            let mut classes = merged_classes(&spec.standard_values, merge);
            for (_, _, t) in &ev.pairs {
                let m = merge.apply(&label(t)).to_owned();
                if !classes.contains(&m) {
                    classes.push(m);
                }
            }
            classes.push(UNMATCHED.to_owned());
            let truths_l: Vec<String> = ev.pairs.iter().map(|(_, _, t)| merge.apply(&label(t)).to_owned()).collect();
            let preds_l: Vec<String> = ev
                .pairs
                .iter()
                .map(|(_, p, _)| match p {
                    Some(p) if classes.iter().any(|c| c == merge.apply(&label(p))) => {
                        merge.apply(&label(p)).to_owned()
                    }
                    _ => UNMATCHED.to_owned(),
                })
                .collect();
            let cm = build_confusion(&preds_l, &truths_l, &classes, &ClassMergeMap::default())?;
            let metrics = weighted_metrics(&cm).ok();
            f1s.extend(metrics.map(|m| m.f1));
            variables.push(VariableReport::Categorical {
                variable: spec.name.clone(),
                evaluated: n,
                coverage: ev.coverage(),
                metrics,
                accuracy_ci: accuracy_ci(cm.trace(), n as u64, opts.ci).ok(),
                confusion: opts.include_confusion.then_some(cm),
            });
        }
    }
    Ok(MetricsReport {
        round,
        variables,
        average_f1: mean(&f1s),
        average_correct_rate: mean(&rates),
    })
}

/// A row of the per-round convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub round: u32,
    /// Empty for round 0.
    pub cases_revised: Option<usize>,
    pub avg_f1: Option<f64>,
    pub avg_correct_rate: Option<f64>,
    pub fraction_converged: f64,
}

pub const CURVE_HEADER: [&str; 5] = ["round", "cases_revised", "avg_f1", "avg_correct_rate", "fraction_converged"];

/// Rebuilds the per-round table from a record store. Revisions are counted
/// as cases whose vector differs from the previous round; metric columns
/// stay empty without truths.
pub fn curve_from_store(
    store: &RecordStore,
    schema: &TemplateSchema,
    truths: Option<&[GroundTruth]>,
    opts: &ReportOptions,
) -> Result<Vec<CurveRow>, MetricsError> {
    let Some(last) = last_round(store) else {
        return Ok(Vec::new());
    };
    let total = store.len();
    let mut rows = Vec::new();
    for round in 0..=last {
        let mut revised = 0;
        let mut converged = 0;
        for case in store.case_ids() {
            let at = store.converged_at(case).unwrap_or(0);
            if at > 0 && at <= round {
                converged += 1;
            }
            if round > 0 {
                if let (Ok(a), Ok(b)) = (store.get(case, round - 1), store.get(case, round)) {
                    if !diff_vectors(a, b).is_empty() {
                        revised += 1;
                    }
                }
            }
        }
        let report = match truths {
            Some(t) => Some(round_report(store, schema, t, round, opts)?),
            None => None,
        };
        rows.push(CurveRow {
            round,
            cases_revised: (round > 0).then_some(revised),
            avg_f1: report.as_ref().and_then(|r| r.average_f1),
            avg_correct_rate: report.as_ref().and_then(|r| r.average_correct_rate),
            fraction_converged: if total == 0 { 0.0 } else { converged as f64 / total as f64 },
        });
    }
    Ok(rows)
}

pub fn write_curve_csv(rows: &[CurveRow], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.cases_revised.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.avg_f1),
            opt(r.avg_correct_rate),
            format!("{:.4}", r.fraction_converged),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// True when the text is a special value; used when scoring raw labels.
pub fn is_excluded_label(label: &str) -> bool {
    is_special_value(label.trim())
}
