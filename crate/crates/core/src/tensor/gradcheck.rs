use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Inputs up to this size are checked element by element; larger ones on a
/// random subset of `SUBSET` elements.
const FULL_CHECK_LIMIT: usize = 128;
const SUBSET: usize = 64;

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>10.3e}  tol {:>8.1e}  {}",
            self.op_name,
            self.max_relative_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks the gradient of a scalar-valued closure at `inputs`.
///
/// Central differences use the step `1e-5 * max(1, |x|)`; the error of an
/// element is `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.
pub fn gradient_check<F>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.numel()],
        };
        let n = input.numel();
        let indices: Vec<usize> = if n <= FULL_CHECK_LIMIT {
            (0..n).collect()
        } else {
            sample(&mut rng, n, SUBSET).into_vec()
        };
        for idx in indices {
            let x = input.data()[idx];
            let h = 1e-5 * x.abs().max(1.0);
            probe[i].data_mut()[idx] = x + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[idx] = x - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[idx] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let ga = analytic[idx];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid(
            "gradient_check",
            format!("closure must return a scalar, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}
