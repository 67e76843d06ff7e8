//! Variational popularity-trend generation.
//!
//! Popularity trajectories are embedded point by point and pooled with a
//! trainable query; the fused sequence states are pooled the same way. Two
//! heads map the pooled features to prior and posterior Gaussians over the
//! initial latent state. The latent state then evolves under a learned
//! field while popularity grows at the mean of a normal truncated below at
//! zero, which keeps every generated trend non-decreasing.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ModelParams};
use crate::ode::{solve_dopri5, SolveConfig};
use crate::tensor::Tensor;

/// Lower end and width of the standard-deviation range.
pub const SIGMA_MIN: f64 = 0.1;
pub const SIGMA_SPAN: f64 = 0.9;

/// `SIGMA_MIN + SIGMA_SPAN * sigmoid(x)`.
pub fn bounded_sigma(tape: &mut Tape, x: Var) -> Var {
    let s = tape.sigmoid(x);
    let s = tape.scale(s, SIGMA_SPAN);
    tape.add_scalar(s, SIGMA_MIN)
}

#[derive(Debug, Clone, Copy)]
pub struct DiagonalGaussian {
    pub mean: Var,
    pub std: Var,
}

/// Unmasked scaled dot-product attention of one query over `keys`, which
/// also serve as values.
pub fn pool(tape: &mut Tape, query: Var, keys: Var) -> Result<Var> {
    let k = tape.value(keys).cols();
    if tape.shape(query) != [k] || tape.shape(keys).len() != 2 {
        return Err(Error::shape(
            "pool",
            format!("query {:?}, keys {:?}", tape.shape(query), tape.shape(keys)),
        ));
    }
    if tape.shape(keys)[0] == 0 {
        return Err(Error::EmptySequence);
    }
    let raw = tape.matmul(keys, query)?;
    let scores = tape.scale(raw, 1.0 / (k as f64).sqrt());
    let w = tape.softmax(scores)?;
    tape.matmul(w, keys)
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_gaussians(tape: &mut Tape, q: DiagonalGaussian, p: DiagonalGaussian) -> Result<Var> {
    // ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
    let ratio = tape.div(p.std, q.std)?;
    let log_ratio = tape.ln(ratio)?;
    let d = tape.sub(q.mean, p.mean)?;
    let d2 = tape.square(d);
    let sq2 = tape.square(q.std);
    let num = tape.add(sq2, d2)?;
    let sp2 = tape.square(p.std);
    let den = tape.scale(sp2, 2.0);
    let frac = tape.div(num, den)?;
    let per_dim = tape.add(log_ratio, frac)?;
    let per_dim = tape.add_scalar(per_dim, -0.5);
    Ok(tape.sum(per_dim))
}

/// Symmetric divergence between two latent points, each read as the mean
/// of a unit-variance Gaussian: `||a - b||^2 / 2`.
pub fn kd_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, 0.5))
}

/// Generated trend at the grid times.
#[derive(Debug, Clone)]
pub struct TrendOutput {
    /// Popularity at each grid time, shape `[T]`.
    pub popularity: Var,
    /// Latent state at the start and at every grid time.
    pub latents: Vec<Var>,
    pub z0: Var,
}

impl TrendOutput {
    pub fn last_latent(&self) -> Var {
        *self.latents.last().expect("latents include the start")
    }
}

#[derive(Debug, Clone)]
pub struct TrendVae {
    pub latent: usize,
    pub hidden: usize,
    /// `f`, on `[log2(P + 1); t]`.
    pub traj: Mlp,
    /// `Z^p`, length `latent`.
    pub query_traj: usize,
    /// `Z^h`, length `hidden`.
    pub query_seq: usize,
    pub mu_p: Mlp,
    pub sigma_p: Mlp,
    pub mu_q: Mlp,
    pub sigma_q: Mlp,
    pub f_z: Mlp,
    pub mu_f: Mlp,
    pub sigma_f: Mlp,
}

impl TrendVae {
    pub fn new(p: &mut ModelParams, hidden: usize, latent: usize, rng: &mut impl Rng) -> Result<Self> {
        let head = [latent + hidden, hidden, latent];
        let field = [latent, hidden, hidden, latent];
        let rate = [latent, hidden, hidden, 1];
        Ok(Self {
            latent,
            hidden,
            traj: Mlp::new(p, "trend.traj", &[2, hidden, latent], Activation::Relu, rng)?,
            query_traj: p.register("trend.query_traj", Tensor::uniform(&[latent], 1.0, rng))?,
            query_seq: p.register("trend.query_seq", Tensor::uniform(&[hidden], 1.0, rng))?,
            mu_p: Mlp::new(p, "trend.mu_p", &head, Activation::Relu, rng)?,
            sigma_p: Mlp::new(p, "trend.sigma_p", &head, Activation::Relu, rng)?,
            mu_q: Mlp::new(p, "trend.mu_q", &head, Activation::Relu, rng)?,
            sigma_q: Mlp::new(p, "trend.sigma_q", &head, Activation::Relu, rng)?,
            f_z: Mlp::new(p, "trend.f_z", &field, Activation::Tanh, rng)?,
            mu_f: Mlp::new(p, "trend.mu_f", &rate, Activation::Tanh, rng)?,
            sigma_f: Mlp::new(p, "trend.sigma_f", &rate, Activation::Tanh, rng)?,
        })
    }

    /// Rows `f([log2(P + 1); t])`, one per trajectory point.
    pub fn encode_trajectory(&self, tape: &mut Tape, v: &[Var], traj: &[(f64, f64)]) -> Result<Var> {
        if traj.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(2 * traj.len());
        for &(t, p) in traj {
            data.push((p + 1.0).log2());
            data.push(t);
        }
        let x = tape.constant(Tensor::matrix(traj.len(), 2, data)?);
        self.traj.forward(tape, v, x)
    }

    pub fn pool_trajectory(&self, tape: &mut Tape, v: &[Var], traj: &[(f64, f64)]) -> Result<Var> {
        let z = self.encode_trajectory(tape, v, traj)?;
        pool(tape, v[self.query_traj], z)
    }

    pub fn pool_sequence(&self, tape: &mut Tape, v: &[Var], states: Var) -> Result<Var> {
        pool(tape, v[self.query_seq], states)
    }

    fn gaussian(&self, tape: &mut Tape, v: &[Var], mu: &Mlp, sigma: &Mlp, traj: Var, seq: Var) -> Result<DiagonalGaussian> {
        let x = tape.concat(&[traj, seq])?;
        let mean = mu.forward(tape, v, x)?;
        let pre = sigma.forward(tape, v, x)?;
        Ok(DiagonalGaussian {
            mean,
            std: bounded_sigma(tape, pre),
        })
    }

    /// Prior from `[Z_ctx; Z_h]`.
    pub fn prior(&self, tape: &mut Tape, v: &[Var], z_ctx: Var, z_h: Var) -> Result<DiagonalGaussian> {
        self.gaussian(tape, v, &self.mu_p, &self.sigma_p, z_ctx, z_h)
    }

    /// Posterior from `[Z_tgt; Z_h]`.
    pub fn posterior(&self, tape: &mut Tape, v: &[Var], z_tgt: Var, z_h: Var) -> Result<DiagonalGaussian> {
        self.gaussian(tape, v, &self.mu_q, &self.sigma_q, z_tgt, z_h)
    }

    /// Reparameterized draw `mean + std * noise`.
    pub fn sample(&self, tape: &mut Tape, g: DiagonalGaussian, noise: &[f64]) -> Result<Var> {
        if noise.len() != self.latent {
            return Err(Error::shape(
                "sample",
                format!("noise length {} vs latent {}", noise.len(), self.latent),
            ));
        }
        if noise.iter().all(|&e| e == 0.0) {
            return Ok(g.mean);
        }
        let eps = tape.constant(Tensor::vector(noise.to_vec()));
        let s = tape.mul(g.std, eps)?;
        tape.add(g.mean, s)
    }

    /// `mu_f(z) + sigma_f(z) * phi(a) / (1 - Phi(a))`, `a = -mu_f / sigma_f`.
    pub fn increment(&self, tape: &mut Tape, v: &[Var], z: Var) -> Result<Var> {
        let mu = self.mu_f.forward(tape, v, z)?;
        let pre = self.sigma_f.forward(tape, v, z)?;
        let sigma = bounded_sigma(tape, pre);
        truncated_normal_mean(tape, mu, sigma)
    }

    /// Integrates `[z; P]` from `t_start` through `grid` with popularity
    /// starting at `p_start`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_trend(
        &self,
        tape: &mut Tape,
        v: &[Var],
        z0: Var,
        p_start: f64,
        t_start: f64,
        grid: &[f64],
        solver: &SolveConfig,
    ) -> Result<TrendOutput> {
        let k = self.latent;
        if grid.first().is_some_and(|&t| !(t > t_start)) {
            return Err(Error::Config("trend grid must lie after the observation time".into()));
        }
        let p0 = tape.constant(Tensor::vector(vec![p_start]));
        let y0 = tape.concat(&[z0, p0])?;
        let field = |tape: &mut Tape, y: Var| -> Result<Var> {
            let z = tape.slice(y, 0, k)?;
            let dz = self.f_z.forward(tape, v, z)?;
            let dp = self.increment(tape, v, z)?;
            tape.concat(&[dz, dp])
        };
        let sol = solve_dopri5(tape, &field, y0, t_start, grid, solver)?;
        let mut latents = Vec::with_capacity(grid.len() + 1);
        latents.push(z0);
        let mut values = Vec::with_capacity(grid.len());
        for &y in &sol.states {
            latents.push(tape.slice(y, 0, k)?);
            values.push(tape.slice(y, k, 1)?);
        }
        let popularity = tape.concat(&values)?;
        Ok(TrendOutput { popularity, latents, z0 })
    }
}

/// Mean of `N(mu, sigma^2)` truncated below at zero.
pub fn truncated_normal_mean(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    let ratio = tape.div(mu, sigma)?;
    let alpha = tape.neg(ratio);
    let hazard = tape.mills(alpha);
    let corr = tape.mul(sigma, hazard)?;
    tape.add(mu, corr)
}
