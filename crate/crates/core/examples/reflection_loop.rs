//! The reflection loop on 50 synthetic cases with the repair simulator:
//! violations fall round by round until every case stops changing.

use std::collections::BTreeMap;

use synoptic_reflect::constraints::{count_violations, ConstraintSet};
use synoptic_reflect::engine::{convergence_curve, run_one_by_one, run_reflection, ReflectionConfig};
use synoptic_reflect::knowledge::KnowledgeBase;
use synoptic_reflect::metrics::{curve_from_store, write_curve_csv, GroundTruth, ReportOptions};
use synoptic_reflect::prompt::PromptSet;
use synoptic_reflect::schema::TemplateSchema;
use synoptic_reflect::simulator::{synthesize_cases, RepairSimulator};

const TEMPLATE: &str = include_str!("../assets/templates/crc_demo.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2024u64);
    let schema = TemplateSchema::from_json_str(TEMPLATE)?;
    let constraints = ConstraintSet::crc_default(&schema)?;
    let synthetic = synthesize_cases(&schema, &constraints, 50, seed);
    let cases: Vec<_> = synthetic.iter().map(|c| c.input.clone()).collect();
    let truths: Vec<_> = synthetic.iter().map(|c| GroundTruth::from_vector(&c.input.id, &c.truth)).collect();
    let backend = RepairSimulator::new(schema.clone(), constraints.clone(), seed)
        .with_truths(synthetic.iter().map(|c| (c.input.id.clone(), c.truth.clone())).collect::<BTreeMap<_, _>>());

    let config = ReflectionConfig {
        concurrency: 8,
        ..Default::default()
    };
    let kb = KnowledgeBase::default();
    let prompts = PromptSet::default();
    let baseline = run_one_by_one(&backend, &kb, &schema, &cases, &prompts, &config)?;
    let trace = run_reflection(&backend, &config, &schema, &kb, &cases, &prompts, baseline.store)?;

    println!("terminated {:?} after {} round(s)", trace.terminated, trace.rounds_executed());
    for (round, n) in count_violations(&trace.store, &constraints) {
        println!("round {round:>2}: {n} violation(s)");
    }
    for p in convergence_curve(&trace) {
        println!("round {:>2}: {:>2} revised, {:.2} converged", p.round, p.cases_revised, p.fraction_converged);
    }

    let rows = curve_from_store(&trace.store, &schema, Some(&truths), &ReportOptions::default())?;
    println!();
    write_curve_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
