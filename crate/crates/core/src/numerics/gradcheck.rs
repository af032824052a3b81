//! Central finite-difference verification of tape gradients (64-bit only).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold for the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-6,
        }
    }
}

const ROUNDOFF_ULPS: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Max relative error for each input, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences.
///
/// The absolute disagreement of each entry is first reduced by the rounding
/// bound of the difference quotient, `16·ε·max(|f₊|, |f₋|, 1) / 2h`.
///
/// `f` receives a fresh tape and one leaf per input each time it is called, and
/// must be deterministic: it is evaluated twice at the base point and any
/// difference between the two results is reported as an invalid oracle.
pub fn check_gradient<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradientReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("gradient check step must be > 0, got {}", opts.step)));
    }
    let first = evaluate(&mut f, inputs)?;
    let second = evaluate(&mut f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {first} vs {second} at the same point"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work = inputs.to_vec();
    let mut per_param = Vec::with_capacity(inputs.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst = 0.0f64;
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + opts.step;
            let plus = evaluate(&mut f, &work)?;
            work[p].data_mut()[i] = orig - opts.step;
            let minus = evaluate(&mut f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            // rounding in the two evaluations, carried through the quotient
            let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = ((a - numeric).abs() - noise).max(0.0) / denom;
            if err.is_nan() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(err);
            }
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradientReport {
        per_param,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    })
}
