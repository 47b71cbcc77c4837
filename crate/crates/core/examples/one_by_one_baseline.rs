//! Round 0: query each variable separately, with retrieved knowledge, using
//! the seeded simulator in place of a model.

use std::path::Path;

use synoptic_reflect::constraints::{check, ConstraintSet};
use synoptic_reflect::engine::{run_one_by_one, ReflectionConfig};
use synoptic_reflect::knowledge::load_packages;
use synoptic_reflect::metrics::{read_truths, round_report, ReportOptions};
use synoptic_reflect::prompt::PromptSet;
use synoptic_reflect::schema::{read_cases, TemplateSchema};
use synoptic_reflect::simulator::RepairSimulator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let data = root.join("examples/data");
    let schema = TemplateSchema::from_json_str(&std::fs::read_to_string(root.join("assets/templates/crc_demo.json"))?)?;
    let constraints = ConstraintSet::crc_default(&schema)?;
    let cases = read_cases(std::io::BufReader::new(std::fs::File::open(data.join("cases.jsonl"))?))?;
    let truths = read_truths(std::io::BufReader::new(std::fs::File::open(data.join("truths.jsonl"))?))?;
    let kb = load_packages(&data.join("knowledge"))?;

    let backend = RepairSimulator::new(schema.clone(), constraints.clone(), 7).with_truths(
        truths
            .iter()
            .map(|t| {
                let v = t.values.iter().fold(Default::default(), |v: synoptic_reflect::schema::AttributeVector, (k, x)| {
                    v.with_value(k.clone(), x.clone())
                });
                (t.case_id.clone(), v)
            })
            .collect(),
    );
    let config = ReflectionConfig::default();
    let baseline = run_one_by_one(&backend, &kb, &schema, &cases, &PromptSet::default(), &config)?;
    println!("{} calls for {} cases x {} variables", baseline.call_log.len(), cases.len(), schema.len());

    for case in baseline.store.case_ids() {
        let v = baseline.store.get(case, 0)?;
        let ids: Vec<_> = check(v, &constraints).into_iter().map(|x| x.constraint_id).collect();
        println!("{case}: {} values, violations {:?}", v.len(), ids);
    }

    let report = round_report(&baseline.store, &schema, &truths, 0, &ReportOptions::default())?;
    println!(
        "\naverage F1 {:.4}, average correct rate {:.4}",
        report.average_f1.unwrap_or(f64::NAN),
        report.average_correct_rate.unwrap_or(f64::NAN)
    );
    Ok(())
}
