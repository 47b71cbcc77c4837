mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use synoptic_reflect::backend::{Backend, BackendError, CallMode, CallTag, ScriptedBackend};
use synoptic_reflect::constraints::{count_violations, ConstraintSet};
use synoptic_reflect::engine::{
    convergence_curve, run_one_by_one, run_reflection, ReflectionConfig, ReflectionTrace, Termination,
};
use synoptic_reflect::knowledge::KnowledgeBase;
use synoptic_reflect::prompt::{to_reply_json, PromptSet, RenderedPrompt, NO_KNOWLEDGE};
use synoptic_reflect::schema::{diff_vectors, AttributeVector, CaseInput, RecordFlag, Value};
use synoptic_reflect::simulator::{synthesize_cases, RepairSimulator};

fn run(script: &ScriptedBackend, cases: &[CaseInput], store: synoptic_reflect::schema::RecordStore, m: u32) -> ReflectionTrace {
    let config = ReflectionConfig {
        max_rounds: m,
        concurrency: 4,
        ..Default::default()
    };
    run_reflection(script, &config, &schema(), &KnowledgeBase::default(), cases, &PromptSet::default(), store).unwrap()
}

#[test]
fn revision_pattern_of_217_cases() {
    // Revisions per case chosen so the per-round counts follow a 217-case
    // run: 195, 54, 28, 27, 25 x4, then 24 cases that never settle.
    let mut plan: Vec<Option<u32>> = Vec::new();
    for (n, r) in [(22, Some(0)), (141, Some(1)), (26, Some(2)), (1, Some(3)), (2, Some(4)), (1, Some(8)), (24, None)] {
        plan.extend(std::iter::repeat_n(r, n));
    }
    assert_eq!(plan.len(), 217);
    let ids: Vec<String> = (0..217).map(|i| format!("R{i:04}")).collect();
    let mut script = ScriptedBackend::new();
    for (id, r) in ids.iter().zip(&plan) {
        script_case(&mut script, id, *r, 16);
    }
    let (cases, store) = seeded(&ids, &state_a());
    let t = run(&script, &cases, store, 16);

    assert_eq!(
        t.revised_per_round,
        vec![195, 54, 28, 27, 25, 25, 25, 25, 24, 24, 24, 24, 24, 24, 24, 24]
    );
    assert_eq!(t.terminated, Termination::MaxRounds);
    let curve = convergence_curve(&t);
    assert_eq!(curve[0].round, 1);
    assert_eq!(curve[0].cases_revised, 195);
    assert!((curve[0].fraction_converged - 22.0 / 217.0).abs() < 1e-12);
    assert!((curve[15].fraction_converged - 193.0 / 217.0).abs() < 1e-12);
    assert!(curve.windows(2).all(|w| w[0].fraction_converged <= w[1].fraction_converged));
}

fn check_invariants(t: &ReflectionTrace) {
    let executed = t.rounds_executed();
    let mut calls: BTreeMap<&str, u32> = BTreeMap::new();
    for tag in &t.call_log {
        assert_eq!(tag.mode, CallMode::Reflection);
        *calls.entry(tag.case_id.as_str()).or_default() += 1;
    }
    for case in t.store.case_ids() {
        let at = t.store.converged_at(case).unwrap();
        let n = calls.get(case).copied().unwrap_or(0);
        if at > 0 {
            assert_eq!(n, at, "{case}");
            let fixed = t.store.get(case, at).unwrap();
            for r in at + 1..=executed {
                assert!(diff_vectors(fixed, t.store.get(case, r).unwrap()).is_empty());
            }
            assert!(t.call_log.iter().all(|c| c.case_id != case || c.round <= at));
        } else {
            assert_eq!(n, executed, "{case}");
        }
    }
    assert!(executed >= 1);
    assert_eq!(t.terminated == Termination::ConvergedAll, t.revised_per_round.last() == Some(&0));
    // Revision counts are the cases that changed in that round.
    for k in 1..=executed {
        let changed = t
            .store
            .case_ids()
            .filter(|c| !diff_vectors(t.store.get(c, k - 1).unwrap(), t.store.get(c, k).unwrap()).is_empty())
            .count();
        assert_eq!(changed, t.revised_per_round[k as usize - 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accounting_and_fill_forward_hold(
        plan in prop::collection::vec(prop::option::weighted(0.8, 0u32..6), 1..12),
        m in 1u32..10,
    ) {
        let ids: Vec<String> = (0..plan.len()).map(|i| format!("P{i}")).collect();
        let mut script = ScriptedBackend::new();
        for (id, r) in ids.iter().zip(&plan) {
            script_case(&mut script, id, *r, m);
        }
        let (cases, store) = seeded(&ids, &state_a());
        let t = run(&script, &cases, store, m);
        prop_assert!(t.rounds_executed() <= m);
        check_invariants(&t);
    }
}

#[test]
fn repair_simulator_lowers_violations_monotonically() {
    let schema = crc_schema();
    let set = ConstraintSet::crc_default(&schema).unwrap();
    for seed in [1u64, 2, 3] {
        let synthetic = synthesize_cases(&schema, &set, 30, seed);
        let cases: Vec<_> = synthetic.iter().map(|c| c.input.clone()).collect();
        let backend = RepairSimulator::new(schema.clone(), set.clone(), seed);
        let config = ReflectionConfig::default();
        let kb = KnowledgeBase::default();
        let prompts = PromptSet::default();
        let base = run_one_by_one(&backend, &kb, &schema, &cases, &prompts, &config).unwrap();
        let t = run_reflection(&backend, &config, &schema, &kb, &cases, &prompts, base.store).unwrap();
        let counts: Vec<usize> = count_violations(&t.store, &set).into_iter().map(|(_, n)| n).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert_eq!(counts.last(), Some(&0));
        check_invariants(&t);
    }
}

#[test]
fn one_by_one_makes_one_call_per_case_and_variable() {
    let schema = schema();
    let mut s = ScriptedBackend::new();
    let cases = vec![CaseInput::new("C1", "Cecal mass, 3 cm."), CaseInput::new("C2", "Rectal mass, 3 cm.")];
    for c in &cases {
        for var in schema.names() {
            let v = AttributeVector::new().with_value(var, state_a().value(var).unwrap().clone());
            s.insert(CallTag::one_by_one(&c.id, var), to_reply_json(&schema, &v).to_string());
        }
    }
    let base = run_one_by_one(&s, &KnowledgeBase::default(), &schema, &cases, &PromptSet::default(), &ReflectionConfig::default()).unwrap();
    assert_eq!(base.call_log.len(), 6);
    assert!(base.failures.is_empty());
    for c in &cases {
        assert!(diff_vectors(base.store.get(&c.id, 0).unwrap(), &state_a()).is_empty());
    }
}

/// Records every prompt it sees and answers with a fixed reply.
struct Recorder {
    reply: fn(&CallTag) -> String,
    seen: std::sync::Mutex<Vec<(CallTag, String)>>,
}

impl Backend for Recorder {
    fn complete(&self, prompt: &RenderedPrompt, tag: &CallTag) -> Result<String, BackendError> {
        self.seen.lock().unwrap().push((tag.clone(), prompt.text.clone()));
        Ok((self.reply)(tag))
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({"kind": "recorder"})
    }
}

#[test]
fn retrieval_off_leaves_knowledge_out_and_bad_replies_are_flagged() {
    let schema = schema();
    let kb = KnowledgeBase::from_documents([("site.md", "# Tumor Site\n\nCecum and rectum are sites.\n")]);
    let backend = Recorder {
        reply: |_| "I cannot tell.".into(),
        seen: Default::default(),
    };
    let cases = vec![CaseInput::new("C1", "Cecal mass.")];
    let off = ReflectionConfig {
        retrieval_k: 0,
        ..Default::default()
    };
    let base = run_one_by_one(&backend, &kb, &schema, &cases, &PromptSet::default(), &off).unwrap();
    let v = base.store.get("C1", 0).unwrap();
    assert_eq!(v.value(SITE), Some(&Value::from("Cannot be determined")));
    assert!(v.has_flag(RecordFlag::ParseFailure));
    assert!(backend.seen.lock().unwrap().iter().all(|(_, p)| !p.contains("Cecum and rectum are sites")));

    backend.seen.lock().unwrap().clear();
    run_one_by_one(&backend, &kb, &schema, &cases, &PromptSet::default(), &ReflectionConfig::default()).unwrap();
    let seen = backend.seen.lock().unwrap();
    let site_prompt = &seen.iter().find(|(t, _)| t.variable.as_deref() == Some(SITE)).unwrap().1;
    assert!(site_prompt.contains("Cecum and rectum are sites"));

    // Reflection prompts without knowledge show the placeholder text.
    drop(seen);
    backend.seen.lock().unwrap().clear();
    let (cases, store) = seeded(&["C1".to_owned()], &state_a());
    run_reflection(&backend, &off, &schema, &kb, &cases, &PromptSet::default(), store).unwrap();
    assert!(backend.seen.lock().unwrap()[0].1.contains(NO_KNOWLEDGE));
}

#[test]
fn back_view_window_is_oldest_first_and_bounded() {
    let schema = schema();
    let backend = Recorder {
        reply: |t| reply(&if t.round % 2 == 1 { state_b() } else { state_a() }),
        seen: Default::default(),
    };
    let (cases, fresh) = seeded(&["C1".to_owned()], &state_a());
    let config = ReflectionConfig {
        max_rounds: 3,
        back_view: 2,
        ..Default::default()
    };
    run_reflection(&backend, &config, &schema, &KnowledgeBase::default(), &cases, &PromptSet::default(), fresh).unwrap();
    let seen = backend.seen.lock().unwrap();
    let labels = |p: &str| -> Vec<u32> {
        p.match_indices("### Round ")
            .map(|(i, m)| p[i + m.len()..].split(|c: char| !c.is_ascii_digit()).next().unwrap().parse().unwrap())
            .collect()
    };
    assert_eq!(labels(&seen[0].1), vec![0]);
    assert_eq!(labels(&seen[1].1), vec![0, 1]);
    assert_eq!(labels(&seen[2].1), vec![1, 2]);
}
