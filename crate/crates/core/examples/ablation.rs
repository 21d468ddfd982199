//! Trains the four architecture variants briefly under identical seeds and
//! compares held-out image-to-normal error.
//!
//! `cargo run --release --example ablation -- [steps]`

use crossnorm::data::DatasetSpec;
use crossnorm::evaluate::{evaluate_samples, Predictions};
use crossnorm::model::{ModelConfig, Variant};
use crossnorm::trainer::{TrainConfig, Trainer};

fn main() -> crossnorm::Result<()> {
    let steps = std::env::args().nth(1).map_or(60, |s| s.parse().expect("steps"));
    let spec = DatasetSpec { resolution: 32, paired: 64, image_only: 32, normal_only: 32, ..DatasetSpec::default() };
    let train = spec.generate()?;
    let held_out = DatasetSpec { seed: 9, paired: 16, image_only: 0, normal_only: 0, ..spec }.generate()?;

    for variant in [Variant::Full, Variant::NoSkip, Variant::NoNormalEncoder, Variant::EncoderDecoder] {
        let mut model = ModelConfig { input_resolution: 32, n_stages: 3, ..ModelConfig::default() };
        model.apply_variant(variant);
        let config = TrainConfig { steps, learning_rate: 1e-3, model, ..TrainConfig::default() };
        let mut trainer = Trainer::new(config, train.clone())?;
        trainer.run(|_, _| {})?;
        let report = evaluate_samples(&Predictions::Model(&trainer.model), &held_out)?;
        let skipped = trainer.log.iter().filter(|r| r.loss.is_none()).count();
        println!("{:<16} {}  ({skipped} phases skipped)", format!("{variant:?}"), report.row());
    }
    Ok(())
}
