//! Writes a small synthetic dataset to disk and checks its hashes.
//!
//! `cargo run --release --example gen_data -- [out_dir]`

use std::path::PathBuf;

use crossnorm::data::{generate_dataset, Dataset, DatasetSpec};

fn main() -> crossnorm::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("crossnorm-gen"), PathBuf::from);
    let spec = DatasetSpec { paired: 8, image_only: 4, normal_only: 4, ..DatasetSpec::default() };
    let manifest = generate_dataset(&spec, &out)?;
    for entry in manifest.samples.iter().take(3) {
        let light = entry.light.direction;
        println!(
            "{} {:<11} light ({:+.2}, {:+.2}, {:+.2}) files {:?}",
            entry.id,
            entry.kind.as_str(),
            light[0],
            light[1],
            light[2],
            entry.files.keys().collect::<Vec<_>>()
        );
    }
    let dataset = Dataset::open(&out)?;
    dataset.verify()?;
    println!("{} samples in {}, hashes verified", dataset.len(), out.display());
    Ok(())
}
