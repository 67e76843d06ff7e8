//! Differentiable initial-value solvers.
//!
//! Both solvers record every step on the tape (discretize-then-optimize),
//! so gradients flow through the unrolled integration. Step-size control
//! in [`solve_dopri5`] is computed from plain values and does not itself
//! carry gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Autonomous vector field `dy/dt = f(y)`.
pub trait OdeFunc {
    fn eval(&self, tape: &mut Tape, y: Var) -> Result<Var>;
}

impl<F> OdeFunc for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        self(tape, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub method: Method,
    /// Fixed step for Euler, in normalized time.
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            step: 0.05,
            rtol: 1e-5,
            atol: 1e-6,
            max_steps: 10_000,
        }
    }
}

impl SolveConfig {
    pub fn euler(step: f64) -> Self {
        Self {
            method: Method::Euler,
            step,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0 && self.rtol > 0.0 && self.atol > 0.0 && self.max_steps > 0;
        if !ok {
            return Err(Error::Config(format!("solver settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Number of Euler steps for an interval, tolerant of round-off in `len / h`.
fn euler_steps(len: f64, h: f64) -> usize {
    if len <= 0.0 {
        return 0;
    }
    ((len / h) - 1e-9).ceil().max(1.0) as usize
}

/// Explicit Euler from `t0` to `t1` with step `h`; the last step is
/// shortened to land exactly on `t1`.
pub fn solve_euler(tape: &mut Tape, f: &dyn OdeFunc, y0: Var, t0: f64, t1: f64, h: f64, max_steps: usize) -> Result<Var> {
    if !(t1 >= t0) {
        return Err(Error::Config(format!("euler interval [{t0}, {t1}] is reversed")));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("euler step {h} must be positive")));
    }
    let n = euler_steps(t1 - t0, h);
    if n > max_steps {
        return Err(Error::StepBudget { max_steps });
    }
    let mut y = y0;
    for i in 0..n {
        let dt = if i + 1 == n { t1 - (t0 + (n - 1) as f64 * h) } else { h };
        let dy = f.eval(tape, y)?;
        y = tape.lin_comb(y, &[(dt, dy)])?;
    }
    Ok(y)
}

// Dormand–Prince 5(4) tableau.
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

#[derive(Debug, Clone)]
pub struct Dopri5Solution {
    /// State at each requested output time.
    pub states: Vec<Var>,
    pub accepted: usize,
    pub rejected: usize,
}

fn rms_scaled(v: &[f64], y: &[f64], atol: f64, rtol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let sc = atol + rtol * b.abs();
            (a / sc) * (a / sc)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn initial_step(tape: &mut Tape, f: &dyn OdeFunc, y0: Var, f0: Var, span: f64, cfg: &SolveConfig) -> Result<f64> {
    let y = tape.value(y0).data().to_vec();
    let d0 = rms_scaled(&y, &y, cfg.atol, cfg.rtol);
    let d1 = rms_scaled(tape.value(f0).data(), &y, cfg.atol, cfg.rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = tape.lin_comb(y0, &[(h0, f0)])?;
    let f1 = f.eval(tape, y1)?;
    let diff: Vec<f64> = tape
        .value(f1)
        .data()
        .iter()
        .zip(tape.value(f0).data())
        .map(|(a, b)| a - b)
        .collect();
    let d2 = rms_scaled(&diff, &y, cfg.atol, cfg.rtol) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Adaptive Dormand–Prince 5(4) with PI step control. Steps are forced to
/// end on every requested output time, so outputs carry no interpolation
/// error.
pub fn solve_dopri5(tape: &mut Tape, f: &dyn OdeFunc, y0: Var, t0: f64, output_times: &[f64], cfg: &SolveConfig) -> Result<Dopri5Solution> {
    cfg.validate()?;
    let mut prev = t0;
    for (i, &t) in output_times.iter().enumerate() {
        let ok = if i == 0 { t >= t0 } else { t > prev };
        if !ok || !t.is_finite() {
            return Err(Error::Config(format!("output times must be strictly increasing from {t0}")));
        }
        prev = t;
    }

    let mut sol = Dopri5Solution {
        states: Vec::with_capacity(output_times.len()),
        accepted: 0,
        rejected: 0,
    };
    let Some(&t_end) = output_times.last() else {
        return Ok(sol);
    };

    let mut t = t0;
    let mut y = y0;
    let mut k1 = f.eval(tape, y)?;
    let mut h = if t_end > t0 {
        initial_step(tape, f, y, k1, t_end - t0, cfg)?
    } else {
        0.0
    };
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut next = 0;

    while next < output_times.len() {
        let target = output_times[next];
        if t >= target {
            sol.states.push(y);
            next += 1;
            continue;
        }
        if sol.accepted + sol.rejected >= cfg.max_steps {
            return Err(Error::StepBudget { max_steps: cfg.max_steps });
        }
        if h.abs() <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::StepUnderflow { t });
        }
        // Land exactly on the output time when the step would reach it.
        let hits = t + h >= target - 16.0 * f64::EPSILON * target.abs().max(1.0);
        let step = if hits { target - t } else { h };

        let mut ks = [k1; 7];
        for s in 1..7 {
            let terms: Vec<(f64, Var)> = A[s].iter().zip(&ks[..s]).map(|(&a, &k)| (step * a, k)).collect();
            let ys = tape.lin_comb(y, &terms)?;
            if s == 6 {
                // Stage 7 evaluates at the new point (FSAL).
                ks[6] = f.eval(tape, ys)?;
                let err = {
                    let yv = tape.value(y).data();
                    let yn = tape.value(ys).data();
                    let mut acc = 0.0;
                    for i in 0..yv.len() {
                        let e: f64 = (0..7).map(|j| E[j] * tape.value(ks[j]).data()[i]).sum::<f64>() * step;
                        let sc = cfg.atol + cfg.rtol * yv[i].abs().max(yn[i].abs());
                        acc += (e / sc) * (e / sc);
                    }
                    (acc / yv.len() as f64).sqrt()
                };
                if !err.is_finite() {
                    return Err(Error::NonFinite("dopri5 error estimate".into()));
                }
                let expo = 0.2 - BETA * 0.75;
                let fac11 = err.powf(expo);
                if err <= 1.0 {
                    let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                    let mut h_new = step / fac;
                    if last_rejected {
                        h_new = h_new.min(step);
                    }
                    fac_old = err.max(1e-4);
                    sol.accepted += 1;
                    last_rejected = false;
                    t = if hits { target } else { t + step };
                    y = ys;
                    k1 = ks[6];
                    // A clamped step should not shrink the next proposal.
                    h = if hits { h_new.max(h) } else { h_new };
                } else {
                    let fac = (fac11 / SAFETY).min(1.0 / FAC_MIN);
                    h = step / fac;
                    sol.rejected += 1;
                    last_rejected = true;
                }
            } else {
                ks[s] = f.eval(tape, ys)?;
            }
        }
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn decay(tape: &mut Tape, y: Var) -> Result<Var> {
        Ok(tape.neg(y))
    }

    #[test]
    fn euler_hand_recursion() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let y = solve_euler(&mut t, &decay, y0, 0.0, 1.0, 0.5, 100).unwrap();
        assert_eq!(t.item(y), 0.25);
    }

    #[test]
    fn euler_zero_interval_is_identity() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.5, -2.0]));
        let y = solve_euler(&mut t, &decay, y0, 0.3, 0.3, 0.05, 100).unwrap();
        assert_eq!(y, y0);
    }

    #[test]
    fn euler_last_step_is_shortened() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let one = |tape: &mut Tape, _: Var| -> Result<Var> { Ok(tape.constant(Tensor::vector(vec![1.0]))) };
        let y = solve_euler(&mut t, &one, y0, 0.0, 0.7, 0.3, 100).unwrap();
        assert!((t.item(y) - 1.7).abs() < 1e-14);
    }

    #[test]
    fn euler_budget() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let err = solve_euler(&mut t, &decay, y0, 0.0, 1.0, 0.01, 10).unwrap_err();
        assert!(matches!(err, Error::StepBudget { .. }));
    }

    #[test]
    fn dopri5_exponential() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let grow = |_: &mut Tape, y: Var| -> Result<Var> { Ok(y) };
        let sol = solve_dopri5(&mut t, &grow, y0, 0.0, &[1.0], &SolveConfig::dopri5(1e-8, 1e-8)).unwrap();
        assert!((t.item(sol.states[0]) - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn dopri5_constant_dynamics() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let sol = solve_dopri5(&mut t, &tape_zero_ok, y0, 0.0, &[0.5, 1.0], &SolveConfig::default()).unwrap();
        for s in sol.states {
            assert_eq!(t.value(s).data(), &[2.0, 3.0]);
        }
    }

    fn tape_zero_ok(tape: &mut Tape, y: Var) -> Result<Var> {
        Ok(tape.scale(y, 0.0))
    }

    #[test]
    fn dopri5_rejects_unordered_outputs() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let r = solve_dopri5(&mut t, &decay, y0, 0.0, &[0.5, 0.5], &SolveConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn dopri5_budget_exhaustion() {
        let mut t = Tape::new();
        let y0 = t.constant(Tensor::vector(vec![1.0]));
        let cfg = SolveConfig {
            max_steps: 3,
            ..SolveConfig::dopri5(1e-12, 1e-12)
        };
        let r = solve_dopri5(&mut t, &decay, y0, 0.0, &[10.0], &cfg);
        assert!(matches!(r, Err(Error::StepBudget { .. })));
    }
}
