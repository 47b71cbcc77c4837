//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints its own verdict line, even after an earlier failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synoptic_reflect::backend::{CallTag, ScriptedBackend};
use synoptic_reflect::cli;
use synoptic_reflect::constraints::{check, count_violations, ConstraintSet};
use synoptic_reflect::engine::{
    convergence_curve, detect_cycles, run_one_by_one, run_reflection, vector_of, ReflectionConfig,
    ReflectionTrace, Termination,
};
use synoptic_reflect::knowledge::KnowledgeBase;
use synoptic_reflect::metrics::{
    curve_from_store, numeric_metrics, weighted_metrics, write_curve_csv, ConfusionMatrix, ReportOptions,
    CURVE_HEADER,
};
use synoptic_reflect::prompt::{parse_model_json, to_reply_json, ParseMode, PromptSet};
use synoptic_reflect::schema::{diff_vectors, AttributeRecord, AttributeVector, CaseInput, RecordStore, TemplateSchema, Value};
use synoptic_reflect::simulator::{synthesize_cases, RepairSimulator};
use synoptic_reflect::tnm::{classify_t, stage_group, MCategory, NCategory, StageGroup, TCategory, TumorFindings};

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Duration, Check); 10] = [
        ("TNM stage table matches the reference grid", secs(1), tnm_table),
        ("size thresholds and T monotonicity", secs(1), size_thresholds),
        ("fixed-point input converges after one round", secs(5), fixed_point),
        ("period-2 oscillator never converges and is reported", secs(5), oscillator),
        ("mixed cases stop at the first quiet round", secs(5), mixed_stop),
        ("repair simulator drives violations to zero", secs(10), simulated_repair),
        ("weighted metrics agree with a brute-force count", secs(5), metric_oracle),
        ("constraint checks on the margin examples", secs(1), margin_constraints),
        ("reflect output is independent of concurrency", secs(10), concurrency_determinism),
        ("reply JSON round-trips through the parser", secs(5), reply_roundtrip),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed > limit {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("criterion {:>2} PASS ({elapsed:.2?}) {name}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {:>2} FAIL ({elapsed:.2?}) {name}: {e}", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn tnm_table() -> Result<(), String> {
    use NCategory::*;
    use StageGroup::*;
    use TCategory::*;
    let golden: &[(TCategory, NCategory, StageGroup)] = &[
        (TX, N0, Occult),
        (Tis, N0, Stage0),
        (T1a, N0, IA),
        (T1b, N0, IA),
        (T2a, N0, IB),
        (T2b, N0, IIA),
        (T1a, N1, IIA),
        (T1b, N1, IIA),
        (T2a, N1, IIA),
        (T2b, N1, IIB),
        (T3, N0, IIB),
        (T1a, N2, IIIA),
        (T1b, N2, IIIA),
        (T2a, N2, IIIA),
        (T2b, N2, IIIA),
        (T3, N1, IIIA),
        (T3, N2, IIIA),
        (T4, N0, IIIA),
        (T4, N1, IIIA),
        (T1a, N3, IIIB),
        (T1b, N3, IIIB),
        (T2a, N3, IIIB),
        (T2b, N3, IIIB),
        (T3, N3, IIIB),
        (T4, N2, IIIB),
    ];
    let lookup: BTreeMap<(TCategory, NCategory), StageGroup> = golden.iter().map(|&(t, n, g)| ((t, n), g)).collect();
    for t in TCategory::ALL {
        for n in NCategory::ALL {
            for m in MCategory::ALL {
                let got = stage_group(t, n, m);
                let want = if m != MCategory::M0 {
                    IV
                } else {
                    lookup.get(&(t, n)).copied().unwrap_or(Indeterminate)
                };
                ensure!(got == want, "{t} {n} {m}: got {got}, want {want}");
            }
        }
    }
    Ok(())
}

fn size_thresholds() -> Result<(), String> {
    use TCategory::*;
    let cases = [
        (1.5, T1a),
        (2.0, T1a),
        (2.5, T1b),
        (3.0, T1b),
        (4.0, T2a),
        (5.0, T2a),
        (6.0, T2b),
        (7.0, T2b),
        (7.5, T3),
    ];
    for (size, want) in cases {
        let got = classify_t(&TumorFindings::sized(size)).map_err(|e| e.to_string())?;
        ensure!(got == want, "{size} cm: got {got}, want {want}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut sizes: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..12.0)).collect();
    sizes.sort_by(f64::total_cmp);
    let mut prev = T1a;
    for s in sizes {
        let t = classify_t(&TumorFindings::sized(s)).map_err(|e| e.to_string())?;
        ensure!(t >= prev, "T fell from {prev} to {t} at {s} cm");
        prev = t;
    }
    Ok(())
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

fn reflect(script: &ScriptedBackend, cases: &[CaseInput], store: RecordStore, m: u32) -> Result<ReflectionTrace, String> {
    let config = ReflectionConfig {
        max_rounds: m,
        concurrency: 4,
        ..Default::default()
    };
    run_reflection(script, &config, &schema(), &KnowledgeBase::default(), cases, &PromptSet::default(), store)
        .map_err(|e| e.to_string())
}

fn fixed_point() -> Result<(), String> {
    let ids = ids("F", 12);
    let mut script = ScriptedBackend::new();
    for id in &ids {
        for k in 1..=16 {
            script.insert(CallTag::reflection(id, k), reply(&state_a()));
        }
    }
    let (cases, store) = seeded(&ids, &state_a());
    let t = reflect(&script, &cases, store, 16)?;
    ensure!(t.rounds_executed() == 1, "executed {} rounds", t.rounds_executed());
    ensure!(t.revised_per_round == vec![0], "revised {:?}", t.revised_per_round);
    ensure!(t.call_log.len() == ids.len(), "{} calls", t.call_log.len());
    ensure!(t.terminated == Termination::ConvergedAll, "terminated {:?}", t.terminated);
    for id in &ids {
        let at = t.store.converged_at(id).map_err(|e| e.to_string())?;
        ensure!(at == 1, "{id} converged at {at}");
    }
    Ok(())
}

fn oscillator() -> Result<(), String> {
    let ids = ids("O", 8);
    let mut script = ScriptedBackend::new();
    for id in &ids {
        script_case(&mut script, id, None, 16);
    }
    let (cases, store) = seeded(&ids, &state_a());
    let t = reflect(&script, &cases, store, 16)?;
    ensure!(t.rounds_executed() == 16, "executed {} rounds", t.rounds_executed());
    ensure!(t.terminated == Termination::MaxRounds, "terminated {:?}", t.terminated);
    ensure!(t.revised_per_round.iter().all(|&n| n == ids.len()), "revised {:?}", t.revised_per_round);
    let expected: BTreeSet<String> = [EXTENT.to_owned()].into();
    for id in &ids {
        let at = t.store.converged_at(id).map_err(|e| e.to_string())?;
        ensure!(at == 0, "{id} converged at {at}");
        let r = detect_cycles(&t.store, id, 4).map_err(|e| e.to_string())?;
        ensure!(r.period == 2, "{id} period {}", r.period);
        ensure!(r.cycling_variables == expected, "{id} cycling {:?}", r.cycling_variables);
    }
    Ok(())
}

fn mixed_stop() -> Result<(), String> {
    let ids = ids("M", 10);
    let mut script = ScriptedBackend::new();
    // Even cases settle immediately, odd ones revise twice and settle at 3.
    for (i, id) in ids.iter().enumerate() {
        script_case(&mut script, id, Some(if i % 2 == 0 { 0 } else { 2 }), 16);
    }
    let (cases, store) = seeded(&ids, &state_a());
    let t = reflect(&script, &cases, store, 16)?;
    ensure!(t.revised_per_round == vec![5, 5, 0], "revised {:?}", t.revised_per_round);
    ensure!(t.rounds_executed() == 3, "executed {} rounds", t.rounds_executed());
    ensure!(t.terminated == Termination::ConvergedAll, "terminated {:?}", t.terminated);
    for (i, id) in ids.iter().enumerate() {
        let want = if i % 2 == 0 { 1 } else { 3 };
        let at = t.store.converged_at(id).map_err(|e| e.to_string())?;
        ensure!(at == want, "{id} converged at {at}, want {want}");
        let fixed = t.store.get(id, at).map_err(|e| e.to_string())?;
        for r in at..=3 {
            let v = t.store.get(id, r).map_err(|e| e.to_string())?;
            ensure!(diff_vectors(fixed, v).is_empty(), "{id} round {r} differs from its fixed point");
        }
        let calls = t.call_log.iter().filter(|c| &c.case_id == id).count() as u32;
        ensure!(calls == at, "{id} made {calls} calls");
    }
    Ok(())
}

fn simulated_repair() -> Result<(), String> {
    let schema = crc_schema();
    let set = ConstraintSet::crc_default(&schema).map_err(|e| e.to_string())?;
    let synthetic = synthesize_cases(&schema, &set, 50, 11);
    let cases: Vec<CaseInput> = synthetic.iter().map(|c| c.input.clone()).collect();
    let backend = RepairSimulator::new(schema.clone(), set.clone(), 11);
    let config = ReflectionConfig {
        max_rounds: 16,
        concurrency: 4,
        ..Default::default()
    };
    let kb = KnowledgeBase::default();
    let prompts = PromptSet::default();
    let base = run_one_by_one(&backend, &kb, &schema, &cases, &prompts, &config).map_err(|e| e.to_string())?;
    let t = run_reflection(&backend, &config, &schema, &kb, &cases, &prompts, base.store).map_err(|e| e.to_string())?;

    let counts: Vec<usize> = count_violations(&t.store, &set).into_iter().map(|(_, n)| n).collect();
    ensure!(counts.windows(2).all(|w| w[1] <= w[0]), "violations rose: {counts:?}");
    ensure!(counts.last() == Some(&0), "violations left: {counts:?}");
    let curve = convergence_curve(&t);
    ensure!(
        curve.last().is_some_and(|p| p.fraction_converged == 1.0),
        "not all converged within 16 rounds"
    );

    let rows = curve_from_store(&t.store, &schema, None, &ReportOptions::default()).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_curve_csv(&rows, &mut buf).map_err(|e| e.to_string())?;
    let text = String::from_utf8(buf).map_err(|e| e.to_string())?;
    let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
    ensure!(header == CURVE_HEADER, "header {header:?}");
    Ok(())
}

/// Per-class precision/recall/F1 by expanding the matrix into labelled
/// pairs and counting, weighted by true-class support.
fn brute_force(cm: &ConfusionMatrix) -> (f64, f64, f64, f64) {
    let n = cm.classes.len();
    let mut pairs = Vec::new();
    for t in 0..n {
        for p in 0..n {
            for _ in 0..cm.counts[t][p] {
                pairs.push((t, p));
            }
        }
    }
    let total = pairs.len() as f64;
    let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / total;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fne = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        let w = (tp + fne) / total;
        wp += w * prec;
        wr += w * rec;
        wf += w * f1;
    }
    (acc, wp, wr, wf)
}

fn metric_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let k = rng.gen_range(2..6);
        let mut counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..8)).collect()).collect();
        if counts.iter().flatten().all(|&c| c == 0) {
            counts[0][0] = 1;
        }
        let classes = (0..k).map(|c| format!("c{c}")).collect();
        let cm = ConfusionMatrix::from_counts(classes, counts);
        let m = weighted_metrics(&cm).map_err(|e| e.to_string())?;
        let (acc, p, r, f) = brute_force(&cm);
        for (name, got, want) in [("accuracy", m.accuracy, acc), ("precision", m.precision, p), ("recall", m.recall, r), ("f1", m.f1, f)] {
            ensure!((got - want).abs() <= 1e-12, "matrix {i}: {name} {got} vs {want}");
        }
        ensure!((m.recall - m.accuracy).abs() <= 1e-12, "matrix {i}: recall {} accuracy {}", m.recall, m.accuracy);
    }
    for i in 0..1000 {
        let n = rng.gen_range(1..40);
        let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let truths: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let m = numeric_metrics(&preds, &truths).map_err(|e| e.to_string())?;
        ensure!(m.mae <= m.rmse + 1e-12, "vector {i}: mae {} > rmse {}", m.mae, m.rmse);
    }
    Ok(())
}

fn margin_constraints() -> Result<(), String> {
    let schema = crc_schema();
    let set = ConstraintSet::crc_default(&schema).map_err(|e| e.to_string())?;
    let status = "Margin Status for Invasive Carcinoma";
    let closest = "Closest Margin to Invasive Carcinoma";
    let distance = "Distance of Tumor from Closest Margin (cm)";
    let triple = |d: f64| {
        vector_of([
            (status, Value::from("Invasive carcinoma present at margin")),
            (closest, Value::from("Distal")),
            (distance, Value::from(d)),
        ])
    };
    let found = check(&triple(0.3), &set);
    ensure!(found.len() == 1, "{} violations at 0.3 cm", found.len());
    ensure!(found[0].constraint_id == "margin-distance-link", "fired {}", found[0].constraint_id);
    let found = check(&triple(0.0), &set);
    ensure!(found.is_empty(), "{} violations at 0 cm", found.len());

    let off_rectum = vector_of([
        ("Tumor Site", Value::from("Cecum")),
        ("Rectal Tumor Location", Value::from("Lower third")),
    ]);
    let found = check(&off_rectum, &set);
    ensure!(
        found.iter().any(|v| v.constraint_id == "rectum-applicability"),
        "rectal location outside the rectum went unflagged"
    );
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn concurrency_determinism() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let ids = ids("D", 40);
    let mut script = ScriptedBackend::new();
    for (i, id) in ids.iter().enumerate() {
        let plan = match i % 5 {
            4 => None,
            r => Some(r as u32),
        };
        script_case(&mut script, id, plan, 10);
    }
    let (cases, store) = seeded(&ids, &state_a());
    write(&d.join("template.json"), &serde_json::to_string(&schema().to_template_json()).map_err(|e| e.to_string())?)?;
    write(&d.join("script.jsonl"), &script.to_jsonl_string())?;
    write(&d.join("backend.json"), r#"{"kind": "scripted", "script": "script.jsonl"}"#)?;
    write(&d.join("records.jsonl"), &store.to_jsonl_string())?;
    let cases_text: String = cases
        .iter()
        .map(|c| serde_json::json!({"id": c.id, "text": c.text}).to_string() + "\n")
        .collect();
    write(&d.join("cases.jsonl"), &cases_text)?;

    let outputs = ["records.jsonl", "trace.json", "curve.csv", "cycles.json"];
    let mut runs = Vec::new();
    for workers in ["1", "8"] {
        let out = d.join(format!("out{workers}"));
        let p = |name: &str| d.join(name).display().to_string();
        let args = [
            "synoptic-reflect".to_owned(),
            "reflect".into(),
            "--template".into(),
            p("template.json"),
            "--cases".into(),
            p("cases.jsonl"),
            "--backend".into(),
            p("backend.json"),
            "--records".into(),
            p("records.jsonl"),
            "--max-rounds".into(),
            "10".into(),
            "--concurrency".into(),
            workers.into(),
            "--out-dir".into(),
            out.display().to_string(),
        ];
        cli::run_from(args, &mut std::io::sink()).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for name in outputs {
            files.push(std::fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"))?);
        }
        runs.push(files);
    }
    for (i, name) in outputs.iter().enumerate() {
        ensure!(runs[0][i] == runs[1][i], "{name} differs between 1 and 8 workers");
    }
    let cycles: serde_json::Value = serde_json::from_slice(&runs[0][3]).map_err(|e| e.to_string())?;
    ensure!(cycles.as_array().map_or(0, Vec::len) == 8, "expected 8 cycle reports");
    Ok(())
}

fn awkward_schema() -> TemplateSchema {
    TemplateSchema::from_json_str(
        r#"{
            "Margin \"note\"": ["close {<1 mm}", "clear, \"wide\"", "see [comment]"],
            "Depth {mm}": {"type": "numeric", "unit": "mm"},
            "Tumor Site": ["Cecum", "Rectum"]
        }"#,
    )
    .expect("schema with quoted values")
}

fn random_vector(schema: &TemplateSchema, rng: &mut ChaCha8Rng) -> AttributeVector {
    let mut v = AttributeVector::new();
    for spec in schema.variables.values() {
        let value = if spec.is_numeric() {
            Value::from((rng.gen_range(0.0..50.0f64) * 1000.0).round() / 1000.0)
        } else {
            let vals = spec.prompt_values();
            Value::from(vals[rng.gen_range(0..vals.len())].as_str())
        };
        let record = AttributeRecord::new(value)
            .with_belief(rng.gen_range(0..=10) as f64 / 10.0)
            .with_explanation(format!("because {{x}} said \"{}\"", rng.gen_range(0..100)));
        v.insert(spec.name.clone(), record);
    }
    v
}

fn reply_roundtrip() -> Result<(), String> {
    let schemas = [schema(), crc_schema(), awkward_schema()];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..500 {
        let schema = &schemas[i % schemas.len()];
        let v = random_vector(schema, &mut rng);
        let json = to_reply_json(schema, &v);
        let decoy = random_vector(schema, &mut rng);
        let forms = [
            format!("```json\n{json:#}\n```"),
            format!("Here is my answer: {json} Let me know if anything is unclear."),
            format!("{json}\n\nAn alternative reading:\n{}", to_reply_json(schema, &decoy)),
        ];
        for (f, text) in forms.iter().enumerate() {
            let parsed = parse_model_json(text, schema, ParseMode::AllVars).map_err(|e| format!("vector {i} form {f}: {e}"))?;
            ensure!(parsed.warnings.is_empty(), "vector {i} form {f}: warnings {:?}", parsed.warnings);
            ensure!(parsed.vector.len() == v.len(), "vector {i} form {f}: {} of {} variables", parsed.vector.len(), v.len());
            for (name, want) in &v.assignments {
                let got = parsed.vector.get(name).ok_or(format!("vector {i} form {f}: {name} missing"))?;
                ensure!(got.value == want.value, "vector {i} form {f}: {name} {:?} vs {:?}", got.value, want.value);
                ensure!(got.belief == want.belief, "vector {i} form {f}: {name} belief");
                ensure!(got.explanation == want.explanation, "vector {i} form {f}: {name} explanation");
            }
        }
    }
    Ok(())
}
