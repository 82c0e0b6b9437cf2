//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares autodiff gradients of `f` against central differences on every
/// element of every input (`stride` > 1 samples every `stride`-th element).
pub fn check<F>(f: F, inputs: &[Tensor], step: f64, stride: usize) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.data(loss)[0])
    };

    let mut work = inputs.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        for j in (0..inputs[ti].len()).step_by(stride.max(1)) {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            out.max_rel_err = out.max_rel_err.max(relative_error(grads[j], numeric));
            out.max_abs_err = out.max_abs_err.max((grads[j] - numeric).abs());
            out.checked += 1;
        }
    }
    Ok(out)
}
