//! Split markdown knowledge packages into sections and rank them for a query.
//!
//! cargo run --example knowledge_retrieval -- "closest margin distance"

use std::path::Path;

use synoptic_reflect::knowledge::{load_packages, retrieve, within_budget, TermOverlap, DEFAULT_CHAR_BUDGET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/knowledge");
    let kb = load_packages(&dir)?;
    println!("{} sections from {} files, digest {}", kb.sections.len(), kb.manifest.len(), &kb.digest()[..12]);

    let query = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "Distance of Tumor from Closest Margin (cm)".to_owned());
    let ranked = retrieve(&kb, &query, 3, &TermOverlap);
    println!("\nquery: {query}");
    for r in &ranked {
        println!("  {:.3}  {} > {}", r.score, r.section.doc_id, r.section.heading_path.join(" > "));
    }

    let kept = within_budget(&ranked, DEFAULT_CHAR_BUDGET);
    let chars: usize = kept.iter().map(|s| s.text.chars().count()).sum();
    println!("\n{} section(s), {chars} characters go into the prompt", kept.len());
    Ok(())
}
