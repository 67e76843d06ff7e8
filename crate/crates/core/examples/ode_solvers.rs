//! Fixed-step Euler against adaptive Dormand-Prince on two test problems.

use vnoip::autodiff::{Tape, Var};
use vnoip::ode::{solve_dopri5, solve_euler, SolveConfig};
use vnoip::tensor::Tensor;

fn decay(tape: &mut Tape, y: Var) -> vnoip::Result<Var> {
    Ok(tape.neg(y))
}

fn rotation(tape: &mut Tape, y: Var) -> vnoip::Result<Var> {
    let a = tape.slice(y, 0, 1)?;
    let b = tape.slice(y, 1, 1)?;
    let nb = tape.neg(b);
    tape.concat(&[nb, a])
}

fn main() -> vnoip::Result<()> {
    let exact = (-1.0f64).exp();
    println!("dy/dt = -y on [0, 1]");
    for h in [0.1, 0.05, 0.025, 0.0125] {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![1.0]));
        let y = solve_euler(&mut tape, &decay, y0, 0.0, 1.0, h, 10_000)?;
        println!("  euler h = {h:<7} error {:.3e}", (tape.item(y) - exact).abs());
    }
    for rtol in [1e-3, 1e-6, 1e-9] {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![1.0]));
        let sol = solve_dopri5(&mut tape, &decay, y0, 0.0, &[1.0], &SolveConfig::dopri5(rtol, rtol * 1e-2))?;
        println!(
            "  dopri5 rtol = {rtol:<6.0e} error {:.3e} ({} accepted, {} rejected steps)",
            (tape.item(sol.states[0]) - exact).abs(),
            sol.accepted,
            sol.rejected
        );
    }

    println!("\nrotation, states at quarter turns");
    let quarter = std::f64::consts::FRAC_PI_2;
    let times: Vec<f64> = (1..=4).map(|k| k as f64 * quarter).collect();
    let mut tape = Tape::new();
    let y0 = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let sol = solve_dopri5(&mut tape, &rotation, y0, 0.0, &times, &SolveConfig::dopri5(1e-9, 1e-12))?;
    for (t, s) in times.iter().zip(&sol.states) {
        let v = tape.value(*s).data();
        println!("  t = {t:.4}  y = ({:+.9}, {:+.9})", v[0], v[1]);
    }
    Ok(())
}
