//! Central finite-difference gradient checking in float64.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Denominator floor so that exactly-zero gradients compare by absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Compare analytic gradients of the scalar `f(inputs)` with central
/// differences of step `h`, for every element of every input.
pub fn check_scalar<G>(f: G, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("leaf gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check of a tensor-valued op, reduced to a scalar through a fixed
/// random projection so that every output element carries a distinct weight.
pub fn check_op<G, R>(op: G, inputs: &[Tensor<f64>], h: f64, rng: &mut R) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    R: Rng + ?Sized,
{
    let probe_tape = Tape::new();
    let probe_vars: Vec<_> = inputs.iter().map(|t| probe_tape.constant(t.clone())).collect();
    let out_shape = op(&probe_tape, &probe_vars)?.shape();
    let n: usize = out_shape.iter().product();
    let proj = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    check_scalar(move |tape, vars| op(tape, vars)?.mul_const(&proj)?.sum(), inputs, h)
}
