#![allow(dead_code)]

use synoptic_reflect::backend::{CallTag, ScriptedBackend};
use synoptic_reflect::engine::vector_of;
use synoptic_reflect::prompt::to_reply_json;
use synoptic_reflect::schema::{AttributeVector, CaseInput, RecordStore, TemplateSchema, Value};

pub const SITE: &str = "Tumor Site";
pub const EXTENT: &str = "Tumor Extent";
pub const SIZE: &str = "Tumor Size - Greatest dimension (cm)";

pub fn schema() -> TemplateSchema {
    TemplateSchema::from_json_str(
        r#"{
            "Tumor Site": ["Cecum", "Ascending colon", "Sigmoid colon", "Rectum"],
            "Tumor Extent": ["Invades into muscularis propria", "Directly invades or adheres to adjacent structure(s)", "Invades through muscularis propria into the pericolic or perirectal tissue"],
            "Tumor Size - Greatest dimension (cm)": {"type": "numeric", "unit": "cm"}
        }"#,
    )
    .unwrap()
}

pub fn crc_schema() -> TemplateSchema {
    TemplateSchema::from_json_str(include_str!("../../assets/templates/crc_demo.json")).unwrap()
}

pub fn state_a() -> AttributeVector {
    vector_of([
        (SITE, Value::from("Cecum")),
        (EXTENT, Value::from("Invades into muscularis propria")),
        (SIZE, Value::from(3.0)),
    ])
}

pub fn state_b() -> AttributeVector {
    vector_of([
        (SITE, Value::from("Cecum")),
        (EXTENT, Value::from("Directly invades or adheres to adjacent structure(s)")),
        (SIZE, Value::from(3.0)),
    ])
}

pub fn state_c() -> AttributeVector {
    vector_of([
        (SITE, Value::from("Ascending colon")),
        (EXTENT, Value::from("Directly invades or adheres to adjacent structure(s)")),
        (SIZE, Value::from(4.5)),
    ])
}

pub fn reply(v: &AttributeVector) -> String {
    format!("```json\n{:#}\n```", to_reply_json(&schema(), v))
}

/// Cases `ids`, each seeded with `v0` at round 0.
pub fn seeded(ids: &[String], v0: &AttributeVector) -> (Vec<CaseInput>, RecordStore) {
    let mut store = RecordStore::new();
    let cases = ids
        .iter()
        .map(|id| {
            store.push_round(id, 0, v0.clone()).unwrap();
            CaseInput::new(id.clone(), format!("Specimen {id}: colectomy with a 3 cm mass."))
        })
        .collect();
    (cases, store)
}

/// Script for a case that revises in rounds `1..=revisions`, alternating
/// B and A, then repeats its last answer. `None` oscillates forever.
pub fn script_case(s: &mut ScriptedBackend, case: &str, revisions: Option<u32>, m: u32) {
    let at = |k: u32| if k % 2 == 1 { state_b() } else { state_a() };
    for k in 1..=m {
        let v = match revisions {
            Some(r) if k > r => at(r),
            _ => at(k),
        };
        s.insert(CallTag::reflection(case, k), reply(&v));
    }
}
