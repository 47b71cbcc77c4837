//! Render both prompt kinds and parse a messy model reply.

use synoptic_reflect::engine::vector_of;
use synoptic_reflect::prompt::{parse_model_json, render_one_by_one, render_reflection, ParseMode, PromptSet};
use synoptic_reflect::schema::{TemplateSchema, Value};

const TEMPLATE: &str = include_str!("../assets/templates/crc_demo.json");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let schema = TemplateSchema::from_json_str(TEMPLATE)?;
    let prompts = PromptSet::default();
    let gross = "Right hemicolectomy with a 4.2 cm mass in the cecum.";

    let spec = schema.get("Tumor Site")?;
    let p = render_one_by_one(&prompts.one_by_one, &spec.name, &spec.prompt_values(), gross)?;
    println!("one-by-one prompt, {} chars:\n{}\n", p.text.len(), &p.text[..p.text.len().min(400)]);

    let round0 = vector_of([("Tumor Site", Value::from("Cecum")), ("Tumor Size - Greatest dimension (cm)", Value::from(4.2))]);
    let r = render_reflection(&prompts.reflection, gross, &[], &schema, &[(0, &round0)], &prompts.inconsistency_examples)?;
    for (slot, digest) in &r.slots {
        println!("slot {slot:<26} sha256 {}", &digest[..12]);
    }

    let reply = r#"Sure, here is my answer:
```json
{"Tumor Site": "Cecum", "Tumor Site - Description": ["4.2 cm mass in the cecum"],
 "Tumor Site - Explanation": "stated", "Tumor Site - Belief Degree": "0.95",
 "Tumor Size - Greatest dimension (cm)": "4.2 cm", "Tumor Size - Greatest dimension (cm) - Belief Degree": 1.4}
```
Let me know if you need anything else {"not": "this one"}"#;
    let parsed = parse_model_json(reply, &schema, ParseMode::AllVars)?;
    for (var, rec) in &parsed.vector.assignments {
        println!("{var}: {} (belief {:.2}, flags {:?})", rec.value, rec.belief, rec.flags);
    }
    Ok(())
}
