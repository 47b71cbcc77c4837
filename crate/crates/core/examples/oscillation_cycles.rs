//! A scripted model that flips one answer every round never converges; the
//! cycle detector reports the period and the variable that keeps switching.

use synoptic_reflect::backend::{CallTag, ScriptedBackend};
use synoptic_reflect::engine::{detect_cycles, run_reflection, vector_of, ReflectionConfig, DEFAULT_MAX_PERIOD};
use synoptic_reflect::knowledge::KnowledgeBase;
use synoptic_reflect::prompt::{to_reply_json, PromptSet};
use synoptic_reflect::schema::{CaseInput, RecordStore, TemplateSchema, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = TemplateSchema::from_json_str(
        r#"{"Tumor Extent": ["Invades into muscularis propria", "Invades through muscularis propria into the pericolic or perirectal tissue"],
            "Tumor Size - Greatest dimension (cm)": {"type": "numeric", "unit": "cm"}}"#,
    )?;
    let a = vector_of([
        ("Tumor Extent", Value::from("Invades into muscularis propria")),
        ("Tumor Size - Greatest dimension (cm)", Value::from(3.5)),
    ]);
    let b = vector_of([
        ("Tumor Extent", Value::from("Invades through muscularis propria into the pericolic or perirectal tissue")),
        ("Tumor Size - Greatest dimension (cm)", Value::from(3.5)),
    ]);

    let config = ReflectionConfig::default();
    let mut script = ScriptedBackend::new();
    for k in 1..=config.max_rounds {
        let v = if k % 2 == 1 { &b } else { &a };
        script.insert(CallTag::reflection("OSC-1", k), to_reply_json(&schema, v).to_string());
        script.insert(CallTag::reflection("FIX-1", k), to_reply_json(&schema, &a).to_string());
    }

    let mut store = RecordStore::new();
    let cases = vec![
        CaseInput::new("OSC-1", "Tumor abuts the serosa; extent is equivocal."),
        CaseInput::new("FIX-1", "Tumor confined to the muscularis propria."),
    ];
    for c in &cases {
        store.push_round(&c.id, 0, a.clone())?;
    }
    let trace = run_reflection(&script, &config, &schema, &KnowledgeBase::default(), &cases, &PromptSet::default(), store)?;
    println!("revised per round: {:?}", trace.revised_per_round);
    println!("terminated: {:?}", trace.terminated);
    for case in ["OSC-1", "FIX-1"] {
        let report = detect_cycles(&trace.store, case, DEFAULT_MAX_PERIOD)?;
        println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    }
    Ok(())
}
