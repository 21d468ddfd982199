//! Normal mapping: shade a coarse, noisy depth map with its own normals and
//! with clean normals, under the same light.
//!
//! `cargo run --release --example enhance_depth -- [out_prefix]`

use crossnorm::data::{write_png, GenOptions, LightSpec, Scene};
use crossnorm::evaluate::{enhance_depth, ShadingSpec};
use crossnorm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossnorm::Result<()> {
    let prefix = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("crossnorm-enhance").display().to_string());
    let res = 64;
    let scene = Scene::generate(3, res, 6, GenOptions::default())?;
    // the height field in pixel units, quantized to 16 levels plus noise
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let height = scene.surface.height_map(res);
    let coarse: Vec<f32> = height
        .data()
        .iter()
        .map(|&h| ((h * res as f32 * 16.0).round() / 16.0) + rng.random_range(-0.3..0.3))
        .collect();
    let depth = Tensor::from_vec(&[1, 1, res, res], coarse)?;

    let spec = ShadingSpec::new(LightSpec::new([0.6, 0.0, 0.8], 1.0)?);
    let out = enhance_depth(&depth, &scene.normals, &spec, &scene.mask)?;
    write_png(&out.baseline, format!("{prefix}.baseline.png").as_ref())?;
    write_png(&out.enhanced, format!("{prefix}.enhanced.png").as_ref())?;

    let roughness = |t: &Tensor| {
        let d = t.data();
        let diffs: Vec<f64> = (1..d.len()).filter(|i| i % res != 0).map(|i| (d[i] - d[i - 1]).abs() as f64).collect();
        diffs.iter().sum::<f64>() / diffs.len() as f64
    };
    println!("mean horizontal step: baseline {:.4}, enhanced {:.4}", roughness(&out.baseline), roughness(&out.enhanced));
    println!("wrote {prefix}.baseline.png and {prefix}.enhanced.png");
    Ok(())
}
