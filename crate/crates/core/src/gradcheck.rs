//! Central finite-difference oracle for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Matrix;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Outcome of a check: worst entry over all inputs.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub entries: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` against central differences.
///
/// `f` must build a fresh graph from the given leaves and return a `1×1` loss.
pub fn check<F>(inputs: &[Matrix<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Matrix<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.as_slice()[idx];
            probe[k].as_mut_slice()[idx] = orig + STEP;
            let plus = eval(&probe)?;
            probe[k].as_mut_slice()[idx] = orig - STEP;
            let minus = eval(&probe)?;
            probe[k].as_mut_slice()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic[k].as_slice()[idx], numeric);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
