//! Central finite-difference validation of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{contract_err, numeric_err, Result};

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(contract_err!("gradient check needs a scalar function"));
    }
    let value = tape.value(out)[0];
    let grads = tape.backward(out)?;
    Ok((value, vars.iter().map(|v| grads.get(*v).map(<[f64]>::to_vec)).collect()))
}

/// Compares tape gradients of the scalar `f(params)` with central
/// differences. Error per coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`; only parameters with `requires_grad`
/// are perturbed.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = eval(&f, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for pi in 0..params.len() {
        if !params[pi].requires_grad() {
            continue;
        }
        let zeros = vec![0.0; params[pi].len()];
        let a_all = analytic[pi].as_deref().unwrap_or(&zeros).to_vec();
        for c in 0..params[pi].len() {
            let base = params[pi].data()[c];
            work[pi].data_mut()[c] = base + FD_STEP;
            let (up, _) = eval(&f, &work)?;
            work[pi].data_mut()[c] = base - FD_STEP;
            let (down, _) = eval(&f, &work)?;
            work[pi].data_mut()[c] = base;
            let n = (up - down) / (2.0 * FD_STEP);
            let a = a_all[c];
            if !n.is_finite() || !a.is_finite() {
                return Err(numeric_err!("non-finite gradient for parameter {pi}, coordinate {c}"));
            }
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            checked += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((pi, c));
            }
        }
    }
    Ok(GradReport {
        max_rel_error: max_rel,
        worst,
        coords_checked: checked,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
