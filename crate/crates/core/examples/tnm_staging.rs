//! Stage lung carcinoma findings into T, N, M and an anatomic stage group.

use synoptic_reflect::tnm::{stage_group, stage_record, FindingsRecord, MCategory, NCategory, TCategory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/findings.jsonl");
    for line in std::fs::read_to_string(path)?.lines() {
        let rec: FindingsRecord = serde_json::from_str(line)?;
        let s = stage_record(&rec)?;
        println!("{:<8} {:<4} {:<3} {:<4} stage {}", s.id, s.t.to_string(), s.n.to_string(), s.m.to_string(), s.stage);
    }

    println!("\nM0 stage table:");
    print!("{:>5}", "");
    for n in NCategory::ALL {
        print!("{:>14}", n.to_string());
    }
    println!();
    for t in TCategory::ALL {
        print!("{:>5}", t.to_string());
        for n in NCategory::ALL {
            print!("{:>14}", stage_group(t, n, MCategory::M0).to_string());
        }
        println!();
    }
    Ok(())
}
