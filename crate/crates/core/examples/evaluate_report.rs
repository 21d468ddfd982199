//! Scores noisy copies of the ground truth and prints the report.

use crossnorm::data::DatasetSpec;
use crossnorm::evaluate::{evaluate_samples, Predictions, Report};
use crossnorm::losses::angular_errors;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> crossnorm::Result<()> {
    let samples = DatasetSpec { seed: 5, paired: 6, image_only: 0, normal_only: 0, ..DatasetSpec::default() }.generate()?;

    // a perfect predictor, via a directory of ground-truth files
    let dir = std::env::temp_dir().join("crossnorm-eval-example");
    std::fs::create_dir_all(&dir).map_err(|e| crossnorm::Error::io(&dir, e))?;
    for s in &samples {
        crossnorm::data::write_pfm(s.normals.as_ref().expect("paired"), &crossnorm::evaluate::prediction_file(&dir, &s.id))?;
    }
    let perfect = evaluate_samples(&Predictions::Directory(&dir), &samples)?;
    println!("ground truth as prediction: {}", perfect.row());

    // Gaussian noise on each component
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut images = Vec::new();
    for s in &samples {
        let truth = s.normals.as_ref().expect("paired");
        let mut noisy = truth.clone();
        for v in noisy.data_mut() {
            *v += 0.25 * rng.sample::<f32, _>(StandardNormal);
        }
        images.push((s.id.clone(), angular_errors(truth, &noisy, &s.mask)?));
    }
    let report = Report::from_images(images)?;
    print!("{}", report.to_text());
    Ok(())
}
