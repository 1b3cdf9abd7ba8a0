//! Central finite-difference checks for tape gradients.
//!
//! The oracle only evaluates forward values; it never touches the backward
//! rules it is checking.

use rand::seq::index;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so exactly-zero
/// gradients do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

fn check<F>(inputs: &[Tensor], eps: f64, coords: &[(usize, usize)], f: &F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work, f)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work, f)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check(inputs, eps, &coords, &f)
}

/// Checks up to `per_input` randomly chosen coordinates of each input.
pub fn check_gradients_sampled<F, R>(
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let k = per_input.min(t.len());
        coords.extend(index::sample(rng, t.len(), k).into_iter().map(|j| (i, j)));
    }
    check(inputs, eps, &coords, &f)
}
