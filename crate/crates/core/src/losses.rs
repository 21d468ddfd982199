//! Masked training losses and angular-error statistics.
//!
//! Normal maps and images are `[B, 3, H, W]`; masks are `[B, 1, H, W]` with
//! values in `{0, 1}`. Only masked pixels contribute to anything here.

use crate::error::{Error, Result};
use crate::tensor::Backward;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Added to the norm product in the cosine loss.
pub const COSINE_EPS: f64 = 1e-8;
/// Predictions shorter than this score 90 degrees.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Validates `mask` against a 3-channel map and returns the per-pixel flags
/// in `(b, h, w)` order.
fn mask_flags<T: Scalar>(op: &'static str, map_shape: &[usize], mask: &Tensor<T>) -> Result<Vec<bool>> {
    let (b, h, w) = match map_shape {
        [b, 3, h, w] => (*b, *h, *w),
        _ => {
            return Err(Error::invalid(
                op,
                format!("expected a [B,3,H,W] map, got {map_shape:?}"),
            ))
        }
    };
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::shape(op, map_shape, mask.shape()));
    }
    let flags: Vec<bool> = mask.data().iter().map(|&v| v > T::from_f64(0.5)).collect();
    for (i, sample) in flags.chunks(h * w).enumerate() {
        if !sample.iter().any(|&f| f) {
            return Err(Error::EmptyMask(format!("{op}: sample {i} has no masked pixels")));
        }
    }
    Ok(flags)
}

/// Yields the channel-0 index `base` of every masked pixel; channel `c` of
/// that pixel lives at `base + c * hw`.
fn masked_pixels(flags: &[bool], hw: usize) -> impl Iterator<Item = usize> + '_ {
    flags.iter().enumerate().filter(|(_, &f)| f).map(move |(p, _)| {
        let (b, s) = (p / hw, p % hw);
        b * 3 * hw + s
    })
}

fn check_pair<T: Scalar>(op: &'static str, target: &Tensor<T>, pred: &Tensor<T>) -> Result<usize> {
    if target.shape() != pred.shape() {
        return Err(Error::shape(op, target.shape(), pred.shape()));
    }
    let [_, _, h, w] = target.dims4(op)?;
    Ok(h * w)
}

/// `1 - mean over masked pixels of <n, n_hat> / (|n| |n_hat| + eps)`.
pub fn cosine_loss<T: Scalar>(tape: &mut Tape<T>, target: &Tensor<T>, pred: Var, mask: &Tensor<T>) -> Result<Var> {
    let p = tape.value(pred);
    let hw = check_pair("cosine_loss", target, p)?;
    let flags = mask_flags("cosine_loss", target.shape(), mask)?;
    let count = flags.iter().filter(|&&f| f).count();
    let (t, q) = (target.data(), p.data());
    let eps = T::from_f64(COSINE_EPS);
    let mut total = T::zero();
    for base in masked_pixels(&flags, hw) {
        let n = [t[base], t[base + hw], t[base + 2 * hw]];
        let m = [q[base], q[base + hw], q[base + 2 * hw]];
        let dot = n[0] * m[0] + n[1] * m[1] + n[2] * m[2];
        let a = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let b = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        total += dot / (a * b + eps);
    }
    let loss = T::one() - total / T::from_f64(count as f64);
    let rule = CosineRule {
        target: target.data().to_vec(),
        flags,
        hw,
        count,
    };
    tape.push_op("cosine_loss", Tensor::scalar(loss), vec![pred], Box::new(rule))
}

struct CosineRule<T> {
    target: Vec<T>,
    flags: Vec<bool>,
    hw: usize,
    count: usize,
}

impl<T: Scalar> Backward<T> for CosineRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let q = inputs[0].data();
        let t = &self.target;
        let hw = self.hw;
        let eps = T::from_f64(COSINE_EPS);
        let scale = -g[0] / T::from_f64(self.count as f64);
        let mut dq = vec![T::zero(); q.len()];
        for base in masked_pixels(&self.flags, hw) {
            let idx = [base, base + hw, base + 2 * hw];
            let n = idx.map(|i| t[i]);
            let m = idx.map(|i| q[i]);
            let dot = n[0] * m[0] + n[1] * m[1] + n[2] * m[2];
            let a = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let b = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            let d = a * b + eps;
            for c in 0..3 {
                let dir = if b > T::zero() { m[c] / b } else { T::zero() };
                let partial = n[c] / d - dot * a * dir / (d * d);
                dq[idx[c]] = scale * partial;
            }
        }
        Ok(vec![Some(dq)])
    }
}

/// Sum over masked pixels of `|I - I_hat|^2`, divided by the masked count.
pub fn l2_loss<T: Scalar>(tape: &mut Tape<T>, target: &Tensor<T>, pred: Var, mask: &Tensor<T>) -> Result<Var> {
    let p = tape.value(pred);
    let hw = check_pair("l2_loss", target, p)?;
    let flags = mask_flags("l2_loss", target.shape(), mask)?;
    let count = flags.iter().filter(|&&f| f).count();
    let (t, q) = (target.data(), p.data());
    let mut total = T::zero();
    for base in masked_pixels(&flags, hw) {
        for c in 0..3 {
            let d = q[base + c * hw] - t[base + c * hw];
            total += d * d;
        }
    }
    let loss = total / T::from_f64(count as f64);
    let rule = L2Rule {
        target: target.data().to_vec(),
        flags,
        hw,
        count,
    };
    tape.push_op("l2_loss", Tensor::scalar(loss), vec![pred], Box::new(rule))
}

struct L2Rule<T> {
    target: Vec<T>,
    flags: Vec<bool>,
    hw: usize,
    count: usize,
}

impl<T: Scalar> Backward<T> for L2Rule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let q = inputs[0].data();
        let scale = g[0] * T::from_f64(2.0 / self.count as f64);
        let mut dq = vec![T::zero(); q.len()];
        for base in masked_pixels(&self.flags, self.hw) {
            for c in 0..3 {
                let i = base + c * self.hw;
                dq[i] = scale * (q[i] - self.target[i]);
            }
        }
        Ok(vec![Some(dq)])
    }
}

/// Angular error in degrees between `n` and the direction of `n_hat`,
/// computed as `atan2(|n x n_hat|, <n, n_hat>)` so that it stays accurate near
/// 0 and 180 degrees. A degenerate prediction scores 90 degrees.
pub fn pixel_angle_deg(n: [f64; 3], n_hat: [f64; 3]) -> f64 {
    let len = (n_hat[0] * n_hat[0] + n_hat[1] * n_hat[1] + n_hat[2] * n_hat[2]).sqrt();
    if len < DEGENERATE_NORM {
        return 90.0;
    }
    let cross = [
        n[1] * n_hat[2] - n[2] * n_hat[1],
        n[2] * n_hat[0] - n[0] * n_hat[2],
        n[0] * n_hat[1] - n[1] * n_hat[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = n[0] * n_hat[0] + n[1] * n_hat[1] + n[2] * n_hat[2];
    sin.atan2(cos).to_degrees()
}

/// Per-pixel angular errors over the masked pixels, in `(b, h, w)` order.
pub fn angular_errors<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, mask: &Tensor<T>) -> Result<Vec<f64>> {
    let hw = check_pair("angular_error_stats", target, pred)?;
    let flags = mask_flags("angular_error_stats", target.shape(), mask)?;
    let (t, q) = (target.data(), pred.data());
    Ok(masked_pixels(&flags, hw)
        .map(|base| {
            let at = |d: &[T], c: usize| d[base + c * hw].as_f64();
            pixel_angle_deg([at(t, 0), at(t, 1), at(t, 2)], [at(q, 0), at(q, 1), at(q, 2)])
        })
        .collect())
}

/// Mean, population std and threshold fractions of a set of angular errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularStats {
    pub mean: f64,
    pub std: f64,
    /// Fractions in `[0, 1]` of errors strictly below 20, 25 and 30 degrees.
    pub pct20: f64,
    pub pct25: f64,
    pub pct30: f64,
    pub count: usize,
}

pub const THRESHOLDS_DEG: [f64; 3] = [20.0, 25.0, 30.0];

impl AngularStats {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyMask("no angular errors to aggregate".into()));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let frac = |thr: f64| errors.iter().filter(|&&e| e < thr).count() as f64 / n;
        Ok(AngularStats {
            mean,
            std: var.sqrt(),
            pct20: frac(THRESHOLDS_DEG[0]),
            pct25: frac(THRESHOLDS_DEG[1]),
            pct30: frac(THRESHOLDS_DEG[2]),
            count: errors.len(),
        })
    }
}

/// Pixel-level statistics of one map pair (std across pixels).
pub fn angular_error_stats<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>, mask: &Tensor<T>) -> Result<AngularStats> {
    AngularStats::from_errors(&angular_errors(target, pred, mask)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::tensor::gradient_check;

    fn px(v: [f64; 3]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 3, 1, 1], v.to_vec()).unwrap()
    }

    fn one_mask() -> Tensor<f64> {
        Tensor::full(&[1, 1, 1, 1], 1.0)
    }

    fn cos_value(n: [f64; 3], m: [f64; 3]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(px(m));
        let l = cosine_loss(&mut tape, &px(n), p, &one_mask()).unwrap();
        tape.value(l).data()[0]
    }

    fn unit_map(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [b, _, h, w] = shape;
        let hw = h * w;
        let mut data = vec![0.0; b * 3 * hw];
        for bi in 0..b {
            for s in 0..hw {
                let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                for c in 0..3 {
                    data[bi * 3 * hw + c * hw + s] = v[c] / len;
                }
            }
        }
        Tensor::from_vec(&shape, data).unwrap()
    }

    fn rand_mask(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..b * h * w).map(|_| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 }).collect();
        for bi in 0..b {
            data[bi * h * w] = 1.0;
        }
        Tensor::from_vec(&[b, 1, h, w], data).unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        assert!(cos_value([0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).abs() < 1e-6);
        assert!((cos_value([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]) - 1.0).abs() < 1e-6);
        assert!((cos_value([0.0, 0.0, 1.0], [0.0, 0.6, 0.8]) - 0.2).abs() < 1e-6);
        assert!((cos_value([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_identity_on_maps() {
        let n = unit_map([2, 3, 4, 4], 1);
        let mut tape = Tape::new();
        let p = tape.constant(n.clone());
        let l = cosine_loss(&mut tape, &n, p, &rand_mask(2, 4, 4, 2)).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-6);
    }

    #[test]
    fn losses_reject_empty_mask_and_shape_mismatch() {
        let n = unit_map([1, 3, 2, 2], 3);
        let mut tape = Tape::new();
        let p = tape.constant(n.clone());
        let empty = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(cosine_loss(&mut tape, &n, p, &empty), Err(Error::EmptyMask(_))));
        assert!(matches!(l2_loss(&mut tape, &n, p, &empty), Err(Error::EmptyMask(_))));
        assert!(angular_error_stats(&n, &n, &empty).is_err());
        let wrong = Tensor::full(&[1, 1, 3, 3], 1.0);
        assert!(cosine_loss(&mut tape, &n, p, &wrong).is_err());
    }

    #[test]
    fn l2_hand_cases() {
        let mut tape = Tape::new();
        let zero = px([0.0; 3]);
        let ones = tape.constant(px([1.0; 3]));
        let l = l2_loss(&mut tape, &zero, ones, &one_mask()).unwrap();
        assert_eq!(tape.value(l).data()[0], 3.0);

        let target = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0; 6]).unwrap();
        let pred = tape.constant(Tensor::from_vec(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap());
        let mask = Tensor::full(&[1, 1, 1, 2], 1.0);
        let l = l2_loss(&mut tape, &target, pred, &mask).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.5);

        let same = tape.constant(target.clone());
        let l = l2_loss(&mut tape, &target, same, &mask).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn stats_two_point_case() {
        let target = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let pred = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let s = angular_error_stats(&target, &pred, &Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        assert!((s.mean - 45.0).abs() < 1e-9 && (s.std - 45.0).abs() < 1e-9);
        assert_eq!((s.pct20, s.pct25, s.pct30), (0.5, 0.5, 0.5));

        let exact = angular_error_stats(&target, &target, &Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
        assert_eq!((exact.mean, exact.std, exact.pct30), (0.0, 0.0, 1.0));
    }

    #[test]
    fn antipodal_pixel() {
        let n = px([0.0, 0.6, 0.8]);
        let s = angular_error_stats(&n, &px([0.0, -0.6, -0.8]), &one_mask()).unwrap();
        assert!((s.mean - 180.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_prediction_scores_ninety() {
        let s = angular_error_stats(&px([0.0, 0.0, 1.0]), &px([0.0, 0.0, 0.0]), &one_mask()).unwrap();
        assert_eq!(s.mean, 90.0);
    }

    #[test]
    fn unmasked_pixels_do_not_matter() {
        let n = unit_map([1, 3, 4, 4], 4);
        let mask = rand_mask(1, 4, 4, 5);
        let pred = unit_map([1, 3, 4, 4], 6);
        let mut altered = pred.clone();
        let hw = 16;
        for s in 0..hw {
            if mask.data()[s] < 0.5 {
                for c in 0..3 {
                    altered.data_mut()[c * hw + s] = 123.0;
                }
            }
        }
        let eval = |p: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(p.clone());
            let c = cosine_loss(&mut tape, &n, v, &mask).unwrap();
            let l = l2_loss(&mut tape, &n, v, &mask).unwrap();
            (tape.value(c).data()[0], tape.value(l).data()[0], angular_error_stats(&n, p, &mask).unwrap())
        };
        assert_eq!(eval(&pred), eval(&altered));
    }

    /// Straight four-deep loop with the arccos form, nothing shared with the library.
    fn naive_stats(n: &Tensor<f64>, p: &Tensor<f64>, m: &Tensor<f64>) -> (f64, f64, [f64; 3]) {
        let s = n.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let at = |t: &Tensor<f64>, bi, c, y, x| t.data()[((bi * t.shape()[1] + c) * h + y) * w + x];
        let mut errs = Vec::new();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    if at(m, bi, 0, y, x) <= 0.5 {
                        continue;
                    }
                    let (mut dot, mut pn) = (0.0, 0.0);
                    for c in 0..3 {
                        dot += at(n, bi, c, y, x) * at(p, bi, c, y, x);
                        pn += at(p, bi, c, y, x).powi(2);
                    }
                    errs.push((dot / pn.sqrt()).clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
        }
        let k = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / k;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / k).sqrt();
        let pct = [20.0, 25.0, 30.0].map(|t| errs.iter().filter(|&&e| e < t).count() as f64 / k);
        (mean, std, pct)
    }

    #[test]
    fn stats_match_naive_loop() {
        for seed in 0..20 {
            let n = unit_map([2, 3, 8, 8], seed);
            let p = n.map(|v| v * 1.3);
            let noise = unit_map([2, 3, 8, 8], seed + 100).map(|v| v * 0.4);
            let p = Tensor::from_vec(p.shape(), p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
            let mask = rand_mask(2, 8, 8, seed + 200);
            let got = angular_error_stats(&n, &p, &mask).unwrap();
            let (mean, std, pct) = naive_stats(&n, &p, &mask);
            assert!((got.mean - mean).abs() < 1e-6 && (got.std - std).abs() < 1e-6);
            assert_eq!([got.pct20, got.pct25, got.pct30], pct);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let n = unit_map([2, 3, 3, 3], 7);
        let mask = rand_mask(2, 3, 3, 8);
        let pred = unit_map([2, 3, 3, 3], 9).map(|v| v * 1.7);
        let report = gradient_check("cosine_loss", std::slice::from_ref(&pred), 1e-3, |t, v| cosine_loss(t, &n, v[0], &mask)).unwrap();
        assert!(report.passed, "{report}");
        let img = n.map(|v| 0.5 + 0.5 * v);
        let report = gradient_check("l2_loss", &[pred], 1e-3, |t, v| l2_loss(t, &img, v[0], &mask)).unwrap();
        assert!(report.passed, "{report}");
    }

    proptest! {
        #[test]
        fn cosine_and_stats_are_scale_invariant(seed in 0u64..1000, log_scale in -3.0f64..3.0) {
            let c = 10f64.powf(log_scale);
            let n = unit_map([1, 3, 3, 3], seed);
            let pred = unit_map([1, 3, 3, 3], seed + 1);
            let scaled = pred.map(|v| v * c);
            let mask = rand_mask(1, 3, 3, seed + 2);
            let loss = |p: &Tensor<f64>| {
                let mut tape = Tape::new();
                let v = tape.constant(p.clone());
                let l = cosine_loss(&mut tape, &n, v, &mask).unwrap();
                tape.value(l).data()[0]
            };
            prop_assert!((loss(&pred) - loss(&scaled)).abs() < 1e-5);
            let a = angular_error_stats(&n, &pred, &mask).unwrap();
            let b = angular_error_stats(&n, &scaled, &mask).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-6);
        }
    }
}
