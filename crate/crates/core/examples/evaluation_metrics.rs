//! Confusion matrices, weighted scores, numeric errors and intervals.

use synoptic_reflect::metrics::{
    accuracy_ci, build_confusion, numeric_metrics, weighted_metrics, CiMethod, ClassMergeMap,
};

fn labels(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let classes = labels(&["Cecum", "Sigmoid colon", "Rectosigmoid", "Rectum"]);
    let truths = labels(&["Cecum", "Cecum", "Rectum", "Rectum", "Rectosigmoid", "Sigmoid colon", "Rectum"]);
    let preds = labels(&["Cecum", "Sigmoid colon", "Rectosigmoid", "Rectum", "Rectum", "Sigmoid colon", "Rectum"]);

    for (label, merge) in [
        ("as extracted", ClassMergeMap::default()),
        ("rectosigmoid merged into rectum", ClassMergeMap::pair("Rectosigmoid", "Rectum")),
    ] {
        let cm = build_confusion(&preds, &truths, &classes, &merge)?;
        let m = weighted_metrics(&cm)?;
        println!("{label}");
        for (name, row) in cm.classes.iter().zip(&cm.counts) {
            println!("  {name:<14} {row:?}");
        }
        println!(
            "  accuracy {:.4}  f1 {:.4}  recall {:.4}  precision {:.4}",
            m.accuracy, m.f1, m.recall, m.precision
        );
    }

    let n = numeric_metrics(&[3.0, 2.5, 5.0], &[3.0, 2.0, 5.0])?;
    println!("\nsizes: correct {:.4}  mae {:.4}  rmse {:.4}", n.correct_rate, n.mae, n.rmse);

    let wilson = accuracy_ci(174, 200, CiMethod::Wilson)?;
    let boot = accuracy_ci(174, 200, CiMethod::Bootstrap { seed: 1, reps: 10_000 })?;
    println!("174/200 correct: wilson [{:.4}, {:.4}]  bootstrap [{:.4}, {:.4}]", wilson.0, wilson.1, boot.0, boot.1);
    Ok(())
}
