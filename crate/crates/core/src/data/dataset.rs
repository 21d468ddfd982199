use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::raster::{read_pfm, read_png, write_pfm, write_png};
use super::synth::{GenOptions, LightSpec, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Paired,
    ImageOnly,
    NormalOnly,
}

impl SampleKind {
    pub fn has_image(self) -> bool {
        self != SampleKind::NormalOnly
    }

    pub fn has_normals(self) -> bool {
        self != SampleKind::ImageOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Paired => "paired",
            SampleKind::ImageOnly => "image_only",
            SampleKind::NormalOnly => "normal_only",
        }
    }
}

/// One training or evaluation record. Rasters are `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kind: SampleKind,
    pub image: Option<Tensor>,
    pub normals: Option<Tensor>,
    pub mask: Tensor,
    pub seed: u64,
}

impl Sample {
    pub(crate) fn from_scene(id: String, scene: Scene, kind: SampleKind, seed: u64) -> Self {
        Sample {
            id,
            kind,
            image: kind.has_image().then_some(scene.image),
            normals: kind.has_normals().then_some(scene.normals),
            mask: scene.mask,
            seed,
        }
    }

    pub fn resolution(&self) -> usize {
        self.mask.shape()[3]
    }
}

/// Generates one sample; deterministic in all arguments.
pub fn gen_sample(seed: u64, resolution: usize, n_bumps: usize, kind: SampleKind) -> Result<Sample> {
    gen_sample_with(seed, resolution, n_bumps, kind, GenOptions::default())
}

pub fn gen_sample_with(seed: u64, resolution: usize, n_bumps: usize, kind: SampleKind, opts: GenOptions) -> Result<Sample> {
    let scene = Scene::generate(seed, resolution, n_bumps, opts)?;
    Ok(Sample::from_scene(format!("{seed:016x}"), scene, kind, seed))
}

/// Per-sample seed, so any sample can be regenerated without its neighbours.
pub fn derive_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub resolution: usize,
    pub n_bumps: usize,
    pub paired: usize,
    pub image_only: usize,
    pub normal_only: usize,
    pub options: GenOptions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            resolution: 64,
            n_bumps: 6,
            paired: 512,
            image_only: 256,
            normal_only: 256,
            options: GenOptions::default(),
        }
    }
}

impl DatasetSpec {
    pub fn len(&self) -> usize {
        self.paired + self.image_only + self.normal_only
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kinds in storage order: paired, then image-only, then normal-only.
    pub fn kind_of(&self, index: usize) -> SampleKind {
        if index < self.paired {
            SampleKind::Paired
        } else if index < self.paired + self.image_only {
            SampleKind::ImageOnly
        } else {
            SampleKind::NormalOnly
        }
    }

    /// All samples in memory, without touching the filesystem.
    pub fn generate(&self) -> Result<Vec<Sample>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.sample(i).map(|(s, _)| s))
            .collect()
    }

    fn sample(&self, index: usize) -> Result<(Sample, LightSpec)> {
        let seed = derive_seed(self.seed, index);
        let scene = Scene::generate(seed, self.resolution, self.n_bumps, self.options)?;
        let light = scene.light;
        let sample = Sample::from_scene(format!("{index:06}"), scene, self.kind_of(index), seed);
        Ok((sample, light))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Ground-truth normals shorter than this are dropped from the mask on load.
pub const MIN_NORMAL_LENGTH: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: SampleKind,
    pub seed: u64,
    pub light: LightSpec,
    /// Keyed by role: `image`, `normals`, `mask`.
    pub files: BTreeMap<String, FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub samples: Vec<ManifestEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every sample of `spec` under `dir` and returns the manifest,
/// which is also saved as `dir/manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    create_dir(dir)?;
    let samples = (0..spec.len())
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let (sample, light) = spec.sample(i)?;
            let sub = dir.join(&sample.id);
            create_dir(&sub)?;
            let mut files = BTreeMap::new();
            let mut record = |role: &str, name: &str| -> Result<()> {
                let path = sub.join(name);
                let sha256 = sha256_file(&path)?;
                files.insert(role.to_string(), FileRecord { path: format!("{}/{name}", sample.id), sha256 });
                Ok(())
            };
            if let Some(img) = &sample.image {
                write_png(img, &sub.join("image.png"))?;
                record("image", "image.png")?;
            }
            if let Some(n) = &sample.normals {
                write_pfm(n, &sub.join("normals.pfm"))?;
                record("normals", "normals.pfm")?;
            }
            write_png(&sample.mask, &sub.join("mask.png"))?;
            record("mask", "mask.png")?;
            Ok(ManifestEntry {
                id: sample.id,
                kind: sample.kind,
                seed: sample.seed,
                light,
                files,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version > MANIFEST_VERSION {
            return Err(Error::Format {
                what: "manifest",
                detail: format!("version {} is newer than {MANIFEST_VERSION}", manifest.version),
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    fn file(&self, entry: &ManifestEntry, role: &str) -> Option<PathBuf> {
        entry.files.get(role).map(|r| self.root.join(&r.path))
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| Error::invalid("dataset", format!("no sample {index}")))?;
        let missing = |role: &str| Error::Format {
            what: "manifest",
            detail: format!("sample {} has no {role} file", entry.id),
        };
        let image = match self.file(entry, "image") {
            Some(p) => Some(read_png(&p)?),
            None if entry.kind.has_image() => return Err(missing("image")),
            None => None,
        };
        let normals = match self.file(entry, "normals") {
            Some(p) => Some(read_pfm(&p)?),
            None if entry.kind.has_normals() => return Err(missing("normals")),
            None => None,
        };
        let mask_path = self.file(entry, "mask").ok_or_else(|| missing("mask"))?;
        let mut mask = read_png(&mask_path)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        if let Some(n) = &normals {
            exclude_degenerate(&mut mask, n)?;
        }
        Ok(Sample {
            id: entry.id.clone(),
            kind: entry.kind,
            image,
            normals,
            mask,
            seed: entry.seed,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }

    /// Recomputes every file hash and compares it with the manifest.
    pub fn verify(&self) -> Result<()> {
        for entry in &self.manifest.samples {
            for rec in entry.files.values() {
                let found = sha256_file(&self.root.join(&rec.path))?;
                if found != rec.sha256 {
                    return Err(Error::Format {
                        what: "dataset",
                        detail: format!("hash mismatch for {}", rec.path),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Clears mask pixels whose ground-truth normal is (near) zero.
pub fn exclude_degenerate(mask: &mut Tensor, normals: &Tensor) -> Result<usize> {
    let [b, _, h, w] = normals.dims4("exclude_degenerate")?;
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::shape("exclude_degenerate", normals.shape(), mask.shape()));
    }
    let hw = h * w;
    let n = normals.data().to_vec();
    let mut dropped = 0;
    for (p, m) in mask.data_mut().iter_mut().enumerate() {
        let base = (p / hw) * 3 * hw + p % hw;
        let len = (n[base].powi(2) + n[base + hw].powi(2) + n[base + 2 * hw].powi(2)).sqrt();
        if *m > 0.5 && !(len >= MIN_NORMAL_LENGTH) {
            *m = 0.0;
            dropped += 1;
        }
    }
    Ok(dropped)
}
