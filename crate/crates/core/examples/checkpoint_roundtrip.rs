//! Trains a few steps, saves a checkpoint, reloads it and compares outputs
//! bit for bit.

use crossnorm::data::DatasetSpec;
use crossnorm::model::{Mode, ModelConfig};
use crossnorm::trainer::{Checkpoint, TrainConfig, Trainer};

fn main() -> crossnorm::Result<()> {
    let samples = DatasetSpec { resolution: 32, paired: 4, image_only: 2, normal_only: 2, ..DatasetSpec::default() }.generate()?;
    let model = ModelConfig { input_resolution: 32, base_width: 8, n_stages: 3, latent_channels: 32, ..ModelConfig::default() };
    let config = TrainConfig { steps: 4, batch_size: 2, learning_rate: 1e-3, model, ..TrainConfig::default() };
    let image = samples[0].image.clone().expect("paired sample");
    let mut trainer = Trainer::new(config, samples)?;
    trainer.run(|step, rec| println!("step {step}: {} batch, {} updates", rec.kind.as_str(), rec.updates))?;

    let path = std::env::temp_dir().join("crossnorm-example.ckpt");
    trainer.checkpoint().save(&path)?;
    let size = std::fs::metadata(&path).map_err(|e| crossnorm::Error::io(&path, e))?.len();
    let loaded = Checkpoint::load(&path)?;
    let a = trainer.model.infer(&image, Mode::ImageToNormal)?;
    let b = loaded.model.infer(&image, Mode::ImageToNormal)?;
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("{} bytes at step {}, adam t {}, outputs bitwise equal: {same}", size, loaded.meta.step, loaded.optimizer.t);
    Ok(())
}
