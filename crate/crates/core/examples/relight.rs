//! Renders one synthetic surface under a sweep of light directions.
//!
//! `cargo run --release --example relight -- [out_dir]`

use std::path::PathBuf;

use crossnorm::data::{render_lambertian, write_png, GenOptions, LightSpec, Scene};

fn main() -> crossnorm::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("crossnorm-relight"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| crossnorm::Error::io(&out, e))?;
    let scene = Scene::generate(7, 64, 6, GenOptions::default())?;
    for (i, azimuth) in [0.0f64, 90.0, 180.0, 270.0].into_iter().enumerate() {
        let (elev, az) = (45f64.to_radians(), azimuth.to_radians());
        let light = LightSpec::new([elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()], 1.0)?;
        let image = render_lambertian(&scene.normals, &scene.albedo, &light)?;
        let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.numel() as f64;
        let path = out.join(format!("light{i}.png"));
        write_png(&image, &path)?;
        println!("azimuth {azimuth:>5.1}  mean intensity {mean:.3}  -> {}", path.display());
    }
    Ok(())
}
