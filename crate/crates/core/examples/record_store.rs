//! Round-indexed records: append rounds, mark convergence, fill forward and
//! round-trip through JSON lines.

use synoptic_reflect::schema::{diff_vectors, AttributeRecord, AttributeVector, RecordStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let v0 = AttributeVector::new()
        .with("Tumor Site", AttributeRecord::new("Rectosigmoid").with_belief(0.6))
        .with_value("Tumor Size - Greatest dimension (cm)", 2.4);
    let v1 = v0
        .clone()
        .with("Tumor Site", AttributeRecord::new("Rectum").with_belief(0.9).with_evidence(["mass 8 cm from the anal verge"]));

    let mut store = RecordStore::new();
    store.push_round("CRC-9", 0, v0.clone())?;
    store.push_round("CRC-9", 1, v1.clone())?;
    store.push_round("CRC-9", 2, v1.clone())?;
    println!("round 0 -> 1 changed {:?}", diff_vectors(&v0, &v1));

    store.set_converged("CRC-9", 2)?;
    store.fill_forward("CRC-9", 5)?;
    println!("rounds stored: {}", store.round_count("CRC-9")?);
    for (round, v) in store.last_rounds("CRC-9", 2)? {
        println!("window round {round}: {}", v.value("Tumor Site").map(ToString::to_string).unwrap_or_default());
    }

    let text = store.to_jsonl_string();
    print!("{}", text.lines().next().unwrap_or_default());
    println!(" ...");
    let back = RecordStore::read_jsonl(text.as_bytes())?;
    assert_eq!(back.converged_at("CRC-9")?, 2);
    Ok(())
}
