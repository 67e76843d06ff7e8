//! Reverse-mode gradients on the tape, checked against central differences.

use vnoip::autodiff::Tape;
use vnoip::gradcheck::grad_check;
use vnoip::gradsuite::run_suite;
use vnoip::tensor::Tensor;

fn main() -> vnoip::Result<()> {
    // f(x) = sum(tanh(W x) * softplus(x)) for a fixed 3x3 W
    let w = Tensor::matrix(3, 3, vec![0.5, -1.0, 0.2, 0.3, 0.8, -0.4, -0.7, 0.1, 0.9])?;
    let f = |tape: &mut Tape, x| {
        let w = tape.constant(w.clone());
        let wx = tape.matmul(w, x)?;
        let a = tape.tanh(wx);
        let b = tape.softplus(x);
        let ab = tape.mul(a, b)?;
        Ok(tape.sum(ab))
    };

    let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    println!("f(x) = {:.6}", tape.item(y));
    println!("df/dx = {:?}", grads.get(x).map(|g| g.data().to_vec()));
    println!("max relative error vs finite differences: {:.2e}", grad_check(f, &x0, 1e-5)?);

    println!("\nbuilt-in suite:");
    for c in run_suite()? {
        println!(
            "  {:<22} {:>9.2e}  (tol {:.0e}, {} coords) {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.coordinates,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
