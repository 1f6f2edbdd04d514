//! Finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over the compared coordinates.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates with a kink (ReLU sign change, argmax or order-statistic
    /// swap) on both sides within the stencil; not compared.
    pub crossed_kink: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` against
/// fourth-order central differences
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` and returns
/// `max |analytic − numeric| / max(1, |analytic|)` over every sampled
/// coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(run(f, inputs, opts, false)?.max_rel_err)
}

/// Like [`grad_check`], but aware of kinks: when the branch signature
/// changes on one side of a coordinate, a one-sided second-order stencil on
/// the other side is used; when both sides change, the coordinate is
/// counted in `crossed_kink` instead of compared.
pub fn grad_check_smooth<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    run(f, inputs, opts, true)
}

fn run<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions, skip_kinks: bool) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(shape_err("grad_check", format!("output must be scalar, got {:?}", v.shape())));
        }
        Ok((v.item(), tape.branch_signature()))
    };

    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(shape_err(
            "grad_check",
            format!("output must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    let base_sig = tape.branch_signature();
    let base_val = tape.value(out).item();
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            let h = opts.eps;
            let mut vals = [0.0; 4];
            let mut same = [true; 4];
            for ((slot, ok), offset) in vals.iter_mut().zip(same.iter_mut()).zip([2.0 * h, h, -h, -2.0 * h]) {
                work[k].data_mut()[i] = orig + offset;
                let (v, sig) = eval(&work)?;
                *slot = v;
                *ok = sig == base_sig;
            }
            work[k].data_mut()[i] = orig;
            let [f2, f1, m1, m2] = vals;
            let numeric = if !skip_kinks || same.iter().all(|&b| b) {
                (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h)
            } else if same[0] && same[1] {
                // second-order one-sided stencils on the side without a kink
                (-3.0 * base_val + 4.0 * f1 - f2) / (2.0 * h)
            } else if same[2] && same[3] {
                (3.0 * base_val - 4.0 * m1 + m2) / (2.0 * h)
            } else {
                report.crossed_kink += 1;
                continue;
            };
            let a = analytic.data()[i];
            report.max_rel_err = report.max_rel_err.max((a - numeric).abs() / a.abs().max(1.0));
            report.checked += 1;
        }
    }
    Ok(report)
}
