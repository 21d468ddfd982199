//! The finite-difference gradient suite over every differentiable operator,
//! both losses and a full image-to-normal forward pass, all in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{cosine_loss, l2_loss};
use crate::model::{CrossModalModel, Mode, ModelConfig, Net};
use crate::tensor::{gradient_check, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// Keeps values at least `gap` away from zero, away from relu kinks.
fn off_kink(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < gap { v + gap * v.signum() } else { v })
}

/// `sum(x * w)` with fixed random `w`, so every element of `x` matters.
fn scalarize(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(tape.shape(x), &mut rng));
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn unit_normals(b: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let hw = h * w;
    let mut t = randn(&[b, 3, h, w], rng);
    let d = t.data_mut();
    for bi in 0..b {
        for s in 0..hw {
            let idx = [0, 1, 2].map(|c| bi * 3 * hw + c * hw + s);
            let len = idx.iter().map(|&i| d[i] * d[i]).sum::<f64>().sqrt();
            for i in idx {
                d[i] /= len;
            }
        }
    }
    t
}

/// A small model that still has every stage of the default architecture.
pub fn probe_model_config() -> ModelConfig {
    ModelConfig {
        input_resolution: 32,
        base_width: 4,
        n_stages: 3,
        latent_channels: 16,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Runs every check at `tolerance` and returns one report per entry.
pub fn run(tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut reports = Vec::new();

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = randn(&[2, 3, 5, 5], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        reports.push(gradient_check(&format!("conv2d s{stride} p{pad}"), &[x, w, b], tolerance, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            scalarize(t, y, 1)
        })?);
    }

    let x = randn(&[2, 6, 3, 3], &mut rng);
    let (g, b) = (randn(&[6], &mut rng), randn(&[6], &mut rng));
    reports.push(gradient_check("group_norm", &[x, g, b], tolerance, |t, v| {
        let y = t.group_norm(v[0], 3, v[1], v[2], 1e-5)?;
        scalarize(t, y, 2)
    })?);

    let x = off_kink(randn(&[2, 3, 4, 4], &mut rng), 0.05);
    reports.push(gradient_check("relu", &[x], tolerance, |t, v| {
        let y = t.relu(v[0])?;
        scalarize(t, y, 3)
    })?);

    let x = randn(&[1, 2, 4, 4], &mut rng);
    reports.push(gradient_check("sigmoid", &[x], tolerance, |t, v| {
        let y = t.sigmoid(v[0])?;
        scalarize(t, y, 4)
    })?);

    let a = randn(&[2, 3, 3, 3], &mut rng);
    // every pair at least 0.1 apart, so no tie is straddled
    let gaps = randn(&[2, 3, 3, 3], &mut rng);
    let b = Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(gaps.data()).map(|(x, g)| x + g.signum() * (0.1 + g.abs())).collect(),
    )?;
    reports.push(gradient_check("elementwise_max", &[a, b], tolerance, |t, v| {
        let y = t.elementwise_max(v[0], v[1])?;
        scalarize(t, y, 5)
    })?);

    let x = randn(&[2, 5, 3, 3], &mut rng);
    let y = randn(&[2, 2, 3, 3], &mut rng);
    reports.push(gradient_check("concat/slice", &[x, y], tolerance, |t, v| {
        let s = t.slice_channels(v[0], 1, 3)?;
        let c = t.concat_channels(s, v[1])?;
        scalarize(t, c, 6)
    })?);

    let x = randn(&[1, 2, 3, 3], &mut rng);
    reports.push(gradient_check("upsample_nearest", &[x], tolerance, |t, v| {
        let y = t.upsample_nearest(v[0], 2)?;
        scalarize(t, y, 7)
    })?);

    let (a, b) = (randn(&[1, 2, 3, 3], &mut rng), randn(&[1, 2, 3, 3], &mut rng));
    reports.push(gradient_check("add/mul/scale", &[a, b], tolerance, |t, v| {
        let s = t.add(v[0], v[1])?;
        let p = t.mul(s, v[0])?;
        let q = t.scale(p, -0.7)?;
        scalarize(t, q, 8)
    })?);

    let target = unit_normals(2, 3, 3, &mut rng);
    let pred = randn(&[2, 3, 3, 3], &mut rng).map(|v| v + 0.5 * v.signum());
    let mask = mask_for(2, 3, 3, &mut rng);
    reports.push(gradient_check("cosine_loss", std::slice::from_ref(&pred), tolerance, |t, v| {
        cosine_loss(t, &target, v[0], &mask)
    })?);
    let image = randn(&[2, 3, 3, 3], &mut rng).map(|v| 0.5 + 0.2 * v);
    reports.push(gradient_check("l2_loss", &[pred], tolerance, |t, v| l2_loss(t, &image, v[0], &mask))?);

    reports.push(full_forward(tolerance, &mut rng)?);
    Ok(reports)
}

fn mask_for(b: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..b * h * w).map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
    for bi in 0..b {
        data[bi * h * w] = 1.0;
    }
    Tensor::from_vec(&[b, 1, h, w], data).expect("mask shape")
}

/// Image-to-normal forward, scalarized, differentiated with respect to the
/// input image and one weight tensor from each end of the network.
fn full_forward(tolerance: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let model: CrossModalModel<f64> = CrossModalModel::<f32>::new(probe_model_config())?.cast();
    let res = model.config().input_resolution;
    let image = randn(&[1, 3, res, res], rng).map(|v| 0.5 + 0.25 * v);
    let probes = ["e_i.stem.conv.weight", "d_n.site1.pre.weight", "d_n.head.bias"];
    let mut inputs = vec![image];
    for name in probes {
        inputs.push(model.params.get(name).expect("probe parameter exists").clone());
    }
    gradient_check("forward image_to_normal", &inputs, tolerance, |t, v| {
        let mut pv = model.params.bind_frozen(t, &[Net::ImageEncoder.prefix(), Net::NormalDecoder.prefix()]);
        for (name, var) in probes.iter().zip(&v[1..]) {
            pv.set(name, *var);
        }
        let y = model.forward(t, &pv, v[0], Mode::ImageToNormal)?;
        scalarize(t, y, 9)
    })
}
