//! Check extracted values against the bundled colorectal constraint set.

use synoptic_reflect::constraints::{check, ConstraintSet};
use synoptic_reflect::engine::vector_of;
use synoptic_reflect::schema::{TemplateSchema, Value};

const TEMPLATE: &str = include_str!("../assets/templates/crc_demo.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = TemplateSchema::from_json_str(TEMPLATE)?;
    let set = ConstraintSet::crc_default(&schema)?;
    for c in &set.constraints {
        println!("{:<36} {:?}: {}", c.id, c.kind, c.message);
    }

    let cases = [
        (
            "positive margin, 0.3 cm",
            vector_of([
                ("Margin Status for Invasive Carcinoma", Value::from("Invasive carcinoma present at margin")),
                ("Distance of Tumor from Closest Margin (cm)", Value::from(0.3)),
            ]),
        ),
        (
            "positive margin, 0 cm",
            vector_of([
                ("Margin Status for Invasive Carcinoma", Value::from("Invasive carcinoma present at margin")),
                ("Distance of Tumor from Closest Margin (cm)", Value::from(0.0)),
            ]),
        ),
        (
            "cecum with a rectal location",
            vector_of([
                ("Tumor Site", "Cecum"),
                ("Rectal Tumor Location", "Lower third"),
                ("Macroscopic Evaluation of Mesorectum", "Not applicable"),
            ]),
        ),
    ];
    for (label, v) in &cases {
        let found = check(v, &set);
        println!("\n{label}: {} violation(s)", found.len());
        for x in found {
            println!("  [{}] {}", x.constraint_id, x.message);
            for (var, value) in x.witness {
                let shown = value.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
                println!("      {var} = {shown}");
            }
        }
    }
    Ok(())
}
