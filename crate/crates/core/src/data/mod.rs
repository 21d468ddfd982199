//! Synthetic Lambertian data, raster files, and crop geometry.
//!
//! Generated scenes are Gaussian-bump height fields with analytic normals,
//! relit by a random directional light. A dataset directory holds
//! `manifest.json` plus one sub-directory per sample with `image.png`,
//! `normals.pfm` and `mask.png` as the sample kind requires.

mod crop;
mod dataset;
mod raster;
mod synth;

pub use crop::{
    apply_crop, convex_hull, crop_from_keypoints, hull_mask, parse_keypoints, read_keypoints, resize, CropSpec,
    Resample, CROP_SCALE,
};
pub use dataset::{
    derive_seed, exclude_degenerate, gen_sample, gen_sample_with, generate_dataset, Dataset, DatasetSpec, FileRecord,
    Manifest, ManifestEntry, Sample, SampleKind, MANIFEST_FILE, MIN_NORMAL_LENGTH,
};
pub use raster::{decode_pfm, encode_pfm, quantize, read_pfm, read_png, write_pfm, write_png};
pub use synth::{
    disk_mask, random_albedo, render_lambertian, Bump, GenOptions, LightSpec, Scene, Surface, MASK_RADIUS,
    MIN_RESOLUTION,
};
