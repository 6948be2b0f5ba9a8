//! Scores toy predictions with average precision, mAP and accuracy.
//!
//! `cargo run --example score_predictions`

use eat_core::pipeline::metrics::{accuracy, argmax, average_precision, map_multilabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true])?;
    println!("AP of [0.9, 0.8, 0.7] against [1, 0, 1]: {:.5}", ap.unwrap_or(f64::NAN));

    let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.7, 0.4], vec![0.6, 0.5, 0.1], vec![0.1, 0.2, 0.8]];
    let targets = vec![
        vec![true, false, false],
        vec![false, true, true],
        vec![true, false, false],
        vec![false, false, false],
    ];
    let report = map_multilabel(&scores, &targets)?;
    println!("multilabel mAP {:.4}; per class {:?}; skipped {:?}", report.map, report.ap, report.skipped);

    let truth = [0, 1, 0, 2];
    let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    println!("argmax predictions {pred:?} vs {truth:?}: accuracy {:.2}", accuracy(&pred, &truth)?);
    Ok(())
}
