//! Forecasting and relation metrics on hand-made arrays.
//!
//! Run with `cargo run --example evaluation_metrics`.

use ndarray::{Array3, Array4};
use rain::eval::{format_curve, min_ade_fde, miss_rate, mse_curve, relation_metrics};
use rain::RelationGraph;

fn main() -> rain::Result<()> {
    // Two agents moving along x for three steps.
    let truth = Array3::from_shape_fn((2, 3, 2), |(i, t, c)| if c == 0 { (t + 1) as f64 + i as f64 } else { 0.0 });
    // Three samples: exact, shifted up by 0.5, shifted up by 2.
    let samples = Array4::from_shape_fn((3, 2, 3, 2), |(k, i, t, c)| {
        truth[[i, t, c]] + if c == 1 { [0.0, 0.5, 2.0][k] } else { 0.0 }
    });
    let (ade, fde) = min_ade_fde(samples.view(), truth.view())?;
    println!("minADE {ade}, minFDE {fde} (the exact sample wins)");
    let worst = samples.slice(ndarray::s![2..3, .., .., ..]).to_owned();
    println!("miss rate at d=1 using only the far sample: {}", miss_rate(worst.view(), truth.view(), 1.0)?);

    let preds = samples.slice(ndarray::s![1..2, .., .., ..]).to_owned();
    let truths = truth.clone().insert_axis(ndarray::Axis(0));
    let curve = mse_curve(preds.view(), truths.view())?;
    print!("\nper-step position MSE:\n{}", format_curve("mse", &curve));

    let truth_g = vec![RelationGraph::from_fn(4, |i, j| i < 2 && j < 2)];
    let guess = vec![RelationGraph::from_fn(4, |i, j| i < 3 && j < 2)];
    let r = relation_metrics(&guess, &truth_g)?;
    println!("\nrelations: accuracy {:.3}, precision {:.3}, recall {:.3}, F1 {:.3}", r.accuracy, r.precision, r.recall, r.f1);
    Ok(())
}
