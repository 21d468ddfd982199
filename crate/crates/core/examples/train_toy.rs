//! Trains the default model on a small synthetic dataset and reports the
//! held-out angular error before and after.
//!
//! `cargo run --release --example train_toy -- [steps] [learning_rate]`

use std::time::Instant;

use crossnorm::data::{DatasetSpec, Sample};
use crossnorm::losses::{angular_errors, AngularStats};
use crossnorm::model::{CrossModalModel, Mode};
use crossnorm::trainer::{TrainConfig, Trainer};
use crossnorm::Tensor;

fn held_out_error(model: &CrossModalModel, held_out: &[Sample]) -> crossnorm::Result<f64> {
    let mut per_image = Vec::new();
    for s in held_out {
        let image = s.image.as_ref().expect("paired");
        let pred = model.infer(image, Mode::ImageToNormal)?;
        let errors = angular_errors(s.normals.as_ref().expect("paired"), &pred, &s.mask)?;
        per_image.push(AngularStats::from_errors(&errors)?.mean);
    }
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

/// Error of predicting an upright normal everywhere.
fn flat_error(held_out: &[Sample]) -> crossnorm::Result<f64> {
    let mut per_image = Vec::new();
    for s in held_out {
        let n = s.normals.as_ref().expect("paired");
        let flat = Tensor::from_vec(n.shape(), n.data().iter().enumerate().map(|(i, _)| if i >= 2 * n.numel() / 3 { 1.0 } else { 0.0 }).collect())?;
        per_image.push(AngularStats::from_errors(&angular_errors(n, &flat, &s.mask)?)?.mean);
    }
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

fn main() -> crossnorm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).map_or(300, |s| s.parse().expect("steps"));
    let lr = args.get(2).map_or(1e-4, |s| s.parse().expect("learning rate"));

    let train = DatasetSpec { seed: 1, ..DatasetSpec::default() }.generate()?;
    let held_out = DatasetSpec { seed: 2, paired: 64, image_only: 0, normal_only: 0, ..DatasetSpec::default() }.generate()?;

    let config = TrainConfig { steps, learning_rate: lr, ..TrainConfig::default() };
    let mut trainer = Trainer::new(config, train)?;
    let before = held_out_error(&trainer.model, &held_out)?;
    println!("constant (0,0,1) prediction: {:.2} deg", flat_error(&held_out)?);
    println!("untrained held-out error: {before:.2} deg");

    let start = Instant::now();
    trainer.run(|step, rec| {
        if step % 25 == 0 {
            let losses: Vec<String> = rec.phases.iter().map(|p| format!("{}={:?}", p.phase.as_str(), p.loss())).collect();
            println!("step {step:4} {:>11} {}  ({:.1}s)", rec.kind.as_str(), losses.join(" "), start.elapsed().as_secs_f64());
        }
    })?;
    let after = held_out_error(&trainer.model, &held_out)?;
    println!("trained held-out error: {after:.2} deg after {steps} steps in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
