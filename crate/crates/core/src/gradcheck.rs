//! Central finite-difference checks for tape gradients.

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a multi-input gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of the scalar `f` against central
/// differences with step `h`, over every coordinate of every input.
/// Coordinates are evaluated in parallel; `f` must be pure.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    let errors: Vec<Result<(f64, (usize, usize))>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += h;
            let plus = eval_scalar(&f, &shifted)?;
            shifted[i].data_mut()[j] -= 2.0 * h;
            let minus = eval_scalar(&f, &shifted)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            Ok(((a - numeric).abs() / a.abs().max(1.0), (i, j)))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: coords.len(),
    };
    for e in errors {
        let (err, at) = e?;
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = at;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}
