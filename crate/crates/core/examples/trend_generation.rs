//! Latent-ODE popularity trends with truncated-normal increments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnoip::autodiff::Tape;
use vnoip::nn::ModelParams;
use vnoip::ode::SolveConfig;
use vnoip::tensor::Tensor;
use vnoip::trend::{truncated_normal_mean, TrendVae};

fn main() -> vnoip::Result<()> {
    println!("mean of N(mu, sigma^2) truncated below at 0:");
    for (mu, sigma) in [(0.0, 1.0), (-2.0, 0.5), (3.0, 1.0)] {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(vec![mu]));
        let s = tape.constant(Tensor::vector(vec![sigma]));
        let r = truncated_normal_mean(&mut tape, m, s)?;
        println!("  mu {mu:+.1} sigma {sigma:.1}: {:.6}", tape.item(r));
    }

    let mut params = ModelParams::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vae = TrendVae::new(&mut params, 16, 4, &mut rng)?;
    let t_obs = 0.3;
    let grid: Vec<f64> = (1..=8).map(|k| t_obs + k as f64 * (1.0 - t_obs) / 8.0).collect();
    let p_obs = 12.0;
    println!("\ntrends from P(t_o) = {p_obs} at t_o = {t_obs} for three latent starts:");
    for k in 0..3 {
        let mut tape = Tape::new();
        let v = params.bind(&mut tape);
        let z0 = tape.constant(Tensor::randn(&[4], &mut rng));
        let out = vae.generate_trend(&mut tape, &v, z0, p_obs, t_obs, &grid, &SolveConfig::default())?;
        println!("  start {k}: {:.2?}", tape.value(out.popularity).data());
    }
    Ok(())
}
