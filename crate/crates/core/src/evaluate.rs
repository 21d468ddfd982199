//! Dataset reports in a fixed-width table format, and normal-mapped shading.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{read_pfm, Dataset, LightSpec, Sample};
use crate::error::{Error, Result};
use crate::losses::{angular_errors, AngularStats, THRESHOLDS_DEG};
use crate::model::{CrossModalModel, Mode};
use crate::tensor::Tensor;

/// What the reported standard deviation is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StdBasis {
    /// Population std of per-image mean errors.
    AcrossImages,
    /// Population std of per-pixel errors of a single image.
    AcrossPixels,
}

impl StdBasis {
    pub fn describe(self) -> &'static str {
        match self {
            StdBasis::AcrossImages => "std across per-image mean errors",
            StdBasis::AcrossPixels => "std across pixels of one image",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub mean: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub dataset: String,
    pub checkpoint: String,
    pub per_image: Vec<ImageRecord>,
    /// Mean of per-image means.
    pub mean: f64,
    pub std: f64,
    pub std_basis: StdBasis,
    /// Fractions of all masked pixels, pooled over images.
    pub pct20: f64,
    pub pct25: f64,
    pub pct30: f64,
    /// Samples that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

fn population(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Report {
    /// Aggregates per-image pixel errors: per-image means first, thresholds
    /// pooled over every pixel.
    pub fn from_images(images: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("report", "no images to aggregate"));
        }
        let mut per_image = Vec::with_capacity(images.len());
        let mut below = [0usize; 3];
        let mut total = 0usize;
        for (id, errors) in &images {
            let stats = AngularStats::from_errors(errors)?;
            per_image.push(ImageRecord {
                id: id.clone(),
                mean: stats.mean,
                pixels: stats.count,
            });
            for (k, thr) in THRESHOLDS_DEG.iter().enumerate() {
                below[k] += errors.iter().filter(|&&e| e < *thr).count();
            }
            total += errors.len();
        }
        let means: Vec<f64> = per_image.iter().map(|r| r.mean).collect();
        let (mean, std) = population(&means);
        let frac = |k: usize| below[k] as f64 / total as f64;
        Ok(Report {
            dataset: String::new(),
            checkpoint: String::new(),
            per_image,
            mean,
            std,
            std_basis: StdBasis::AcrossImages,
            pct20: frac(0),
            pct25: frac(1),
            pct30: frac(2),
            failures: Vec::new(),
        })
    }

    /// One image, with the std taken across its pixels.
    pub fn single_image(id: &str, errors: &[f64]) -> Result<Self> {
        let stats = AngularStats::from_errors(errors)?;
        Ok(Report {
            std: stats.std,
            std_basis: StdBasis::AcrossPixels,
            ..Self::from_images(vec![(id.to_string(), errors.to_vec())])?
        })
    }

    /// A bare summary row, e.g. to render published numbers. Percentages
    /// are given as fractions in `[0, 1]`.
    pub fn from_summary(mean: f64, std: f64, pct20: f64, pct25: f64, pct30: f64) -> Self {
        Report {
            dataset: String::new(),
            checkpoint: String::new(),
            per_image: Vec::new(),
            mean,
            std,
            std_basis: StdBasis::AcrossImages,
            pct20,
            pct25,
            pct30,
            failures: Vec::new(),
        }
    }

    /// `mean±std  p20%  p25%  p30%` with one decimal each.
    pub fn row(&self) -> String {
        format!(
            "{:.1}±{:.1}  {:.1}%  {:.1}%  {:.1}%",
            self.mean,
            self.std,
            100.0 * self.pct20,
            100.0 * self.pct25,
            100.0 * self.pct30
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}", self.dataset);
        let _ = writeln!(out, "checkpoint: {}", self.checkpoint);
        let _ = writeln!(out, "images: {}", self.per_image.len());
        let _ = writeln!(out, "mean: mean of per-image mean angular errors (degrees)");
        let _ = writeln!(out, "std: {}", self.std_basis.describe());
        let _ = writeln!(out, "thresholds: percentage of masked pixels, pooled over images");
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12}{:<7}{:<7}<30°", "mean±std", "<20°", "<25°");
        let _ = writeln!(out, "{}", self.row());
        if !self.per_image.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<12} {:>8} {:>8}", "id", "mean", "pixels");
            for r in &self.per_image {
                let _ = writeln!(out, "{:<12} {:>8.2} {:>8}", r.id, r.mean, r.pixels);
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "failed samples: {}", self.failures.len());
            for (id, why) in &self.failures {
                let _ = writeln!(out, "{id}: {why}");
            }
        }
        out
    }

    /// Header plus one row; percentages in percent.
    pub fn to_csv(&self) -> String {
        format!(
            "mean,std,pct20,pct25,pct30\n{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.mean,
            self.std,
            100.0 * self.pct20,
            100.0 * self.pct25,
            100.0 * self.pct30
        )
    }

    /// Writes `<prefix>.txt` and `<prefix>.csv`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        for (ext, body) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let mut name = prefix.as_os_str().to_owned();
            name.push(format!(".{ext}"));
            let path = Path::new(&name);
            std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Where predicted normals come from.
pub enum Predictions<'a> {
    Model(&'a CrossModalModel),
    /// Directory of `<sample_id>.pred.pfm` files.
    Directory(&'a Path),
}

pub fn prediction_file(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.pred.pfm"))
}

fn evaluate_sample(source: &Predictions, sample: &Sample) -> Result<Vec<f64>> {
    let truth = sample
        .normals
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluate", "no ground-truth normals"))?;
    let pred = match source {
        Predictions::Model(model) => {
            let image = sample
                .image
                .as_ref()
                .ok_or_else(|| Error::invalid("evaluate", "no input image"))?;
            model.infer(image, Mode::ImageToNormal)?
        }
        Predictions::Directory(dir) => read_pfm(&prediction_file(dir, &sample.id))?,
    };
    angular_errors(truth, &pred, &sample.mask)
}

/// Evaluates samples, listing the ones that fail instead of aborting.
pub fn evaluate_samples(source: &Predictions, samples: &[Sample]) -> Result<Report> {
    let results: Vec<(String, Result<Vec<f64>>)> = samples
        .par_iter()
        .map(|s| (s.id.clone(), evaluate_sample(source, s)))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(errors) => ok.push((id, errors)),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::invalid(
            "evaluate",
            format!("none of {} samples could be evaluated", samples.len()),
        ));
    }
    let mut report = Report::from_images(ok)?;
    report.failures = failures;
    Ok(report)
}

/// Evaluates the samples of a dataset directory that carry ground-truth
/// normals (and an image, when a model predicts). Samples that fail to load
/// are listed as failures.
pub fn evaluate_dataset(source: &Predictions, dataset: &Dataset) -> Result<Report> {
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let needs_image = matches!(source, Predictions::Model(_));
    for (i, entry) in dataset.manifest.samples.iter().enumerate() {
        if !entry.kind.has_normals() || (needs_image && !entry.kind.has_image()) {
            continue;
        }
        match dataset.load(i) {
            Ok(s) => samples.push(s),
            Err(e) => failures.push((entry.id.clone(), e.to_string())),
        }
    }
    let mut report = evaluate_samples(source, &samples)?;
    report.failures.extend(failures);
    report.dataset = dataset.root.display().to_string();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingSpec {
    pub light: LightSpec,
    pub ambient: f64,
}

impl ShadingSpec {
    pub const DEFAULT_AMBIENT: f64 = 0.1;

    pub fn new(light: LightSpec) -> Self {
        ShadingSpec {
            light,
            ambient: Self::DEFAULT_AMBIENT,
        }
    }
}

/// Greyscale `[B, 1, H, W]`: `clamp(ambient + intensity * max(0, <n/|n|, l>), 0, 1)`
/// inside the mask, 0 outside.
pub fn shade_with_normals(normals: &Tensor, spec: &ShadingSpec, mask: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = normals.dims4("shade_with_normals")?;
    if c != 3 {
        return Err(Error::invalid("shade_with_normals", "normals need 3 channels"));
    }
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::shape("shade_with_normals", normals.shape(), mask.shape()));
    }
    spec.light.validate()?;
    let hw = h * w;
    let n = normals.data();
    let [lx, ly, lz] = spec.light.direction;
    let out = mask
        .data()
        .iter()
        .enumerate()
        .map(|(p, &m)| {
            if m <= 0.5 {
                return 0.0;
            }
            let base = (p / hw) * 3 * hw + p % hw;
            let v = [n[base] as f64, n[base + hw] as f64, n[base + 2 * hw] as f64];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let diffuse = if len > 0.0 && len.is_finite() {
                ((v[0] * lx + v[1] * ly + v[2] * lz) / len).max(0.0)
            } else {
                0.0
            };
            (spec.ambient + spec.light.intensity * diffuse).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::from_vec(&[b, 1, h, w], out)
}

/// Normals `normalize(-dz/dx, -dz/dy, 1)` of a `[1, 1, H, W]` depth map in
/// pixel units. Central differences inside, one-sided at borders and next to
/// NaN depths; NaN pixels get a zero normal and are returned in the second
/// value as a mask of valid pixels.
pub fn normals_from_depth(depth: &Tensor) -> Result<(Tensor, Tensor)> {
    let [b, c, h, w] = depth.dims4("normals_from_depth")?;
    if b != 1 || c != 1 {
        return Err(Error::invalid("normals_from_depth", format!("expected [1,1,H,W], got {:?}", depth.shape())));
    }
    let z = depth.data();
    let at = |i: usize, j: usize| z[i * w + j] as f64;
    let valid = |i: usize, j: usize| z[i * w + j].is_finite();
    // derivative along one axis from whichever neighbours are usable
    let diff = |here: f64, prev: Option<f64>, next: Option<f64>| match (prev, next) {
        (Some(p), Some(n)) => (n - p) / 2.0,
        (None, Some(n)) => n - here,
        (Some(p), None) => here - p,
        (None, None) => 0.0,
    };
    let hw = h * w;
    let mut normals = vec![0.0f32; 3 * hw];
    let mut ok = vec![0.0f32; hw];
    for i in 0..h {
        for j in 0..w {
            if !valid(i, j) {
                continue;
            }
            let here = at(i, j);
            let pick = |ii: Option<usize>, jj: Option<usize>| match (ii, jj) {
                (Some(ii), Some(jj)) if ii < h && jj < w && valid(ii, jj) => Some(at(ii, jj)),
                _ => None,
            };
            let gx = diff(here, pick(Some(i), j.checked_sub(1)), pick(Some(i), Some(j + 1)));
            let gy = diff(here, pick(i.checked_sub(1), Some(j)), pick(Some(i + 1), Some(j)));
            let len = (gx * gx + gy * gy + 1.0).sqrt();
            let s = i * w + j;
            normals[s] = (-gx / len) as f32;
            normals[hw + s] = (-gy / len) as f32;
            normals[2 * hw + s] = (1.0 / len) as f32;
            ok[s] = 1.0;
        }
    }
    Ok((
        Tensor::from_vec(&[1, 3, h, w], normals)?,
        Tensor::from_vec(&[1, 1, h, w], ok)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enhancement {
    pub baseline: Tensor,
    pub enhanced: Tensor,
    /// Mask pixels dropped because their depth is NaN.
    pub excluded_nan: usize,
}

/// Shades the raw depth's own normals (baseline) and the predicted normals
/// (enhanced) under the same light.
pub fn enhance_depth(depth: &Tensor, predicted: &Tensor, spec: &ShadingSpec, mask: &Tensor) -> Result<Enhancement> {
    let (depth_normals, valid) = normals_from_depth(depth)?;
    if predicted.shape() != depth_normals.shape() {
        return Err(Error::shape("enhance_depth", depth_normals.shape(), predicted.shape()));
    }
    if mask.shape() != valid.shape() {
        return Err(Error::shape("enhance_depth", valid.shape(), mask.shape()));
    }
    let mut excluded_nan = 0;
    let joint: Vec<f32> = mask
        .data()
        .iter()
        .zip(valid.data())
        .map(|(&m, &v)| {
            if m > 0.5 && v < 0.5 {
                excluded_nan += 1;
            }
            if m > 0.5 && v > 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if excluded_nan > 0 {
        log::warn!("{excluded_nan} masked pixels have NaN depth and were excluded");
    }
    let joint = Tensor::from_vec(mask.shape(), joint)?;
    Ok(Enhancement {
        baseline: shade_with_normals(&depth_normals, spec, &joint)?,
        enhanced: shade_with_normals(predicted, spec, &joint)?,
        excluded_nan,
    })
}
