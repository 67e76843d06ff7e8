//! The full predictor: sequence encoder, trend VAE, decoder and losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ModelParams};
use crate::ode::SolveConfig;
use crate::sample::CascadeSample;
use crate::sequence::SequenceEncoder;
use crate::tensor::Tensor;
use crate::trend::{kd_loss, kl_gaussians, TrendOutput, TrendVae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// No trend module: the decoder sees only the sequence states and the
    /// loss is the main term alone.
    NoTrend,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "notrend" | "no-trend" => Ok(Variant::NoTrend),
            _ => Err(Error::Config(format!("unknown variant {s:?} (full | notrend)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Width of each embedding view.
    pub embed_dim: usize,
    pub grid_points: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub euler_step: f64,
    pub trend_solver: SolveConfig,
    pub variant: Variant,
    /// Seeds parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 64,
            embed_dim: 40,
            grid_points: 8,
            lambda1: 0.3,
            lambda2: 0.6,
            euler_step: 0.05,
            trend_solver: SolveConfig::default(),
            variant: Variant::Full,
            init_seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.grid_points == 0 {
            return Err(Error::Config("hidden, latent and grid_points must be positive".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("embed_dim {} must be even and positive", self.embed_dim)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.euler_step > 0.0) {
            return Err(Error::Config(format!("euler_step {} must be positive", self.euler_step)));
        }
        self.trend_solver.validate()
    }
}

/// Loss terms of one training pass. `total` is on the tape; the rest are
/// plain values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub main: f64,
    pub rg: f64,
    pub kl: f64,
    pub kd: f64,
    pub prediction: f64,
}

/// Everything the trend-side computation produced in a training pass.
#[derive(Debug, Clone)]
pub struct TrainPass {
    pub prediction: Var,
    pub prior: Option<TrendOutput>,
    pub posterior: Option<TrendOutput>,
    pub kl: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub encoder: SequenceEncoder,
    pub trend: Option<TrendVae>,
    pub decoder: Mlp,
}

fn log2_1p_const(x: f64) -> f64 {
    (x + 1.0).log2()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ModelParams::new();
        let h = config.hidden;
        let encoder = SequenceEncoder::new(
            &mut params,
            2 * config.embed_dim,
            h,
            config.euler_step,
            config.trend_solver.max_steps,
            &mut rng,
        )?;
        let (trend, dec_in) = match config.variant {
            Variant::Full => (
                Some(TrendVae::new(&mut params, h, config.latent, &mut rng)?),
                2 * h + config.grid_points,
            ),
            Variant::NoTrend => (None, 2 * h),
        };
        let decoder = Mlp::new(&mut params, "decoder", &[dec_in, h, 1], Activation::Relu, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            trend,
            decoder,
        })
    }

    fn check_sample(&self, s: &CascadeSample) -> Result<()> {
        let d = self.config.embed_dim;
        if s.global.cols() != d || s.local.cols() != d {
            return Err(Error::Config(format!(
                "sample embeddings are {} / {} wide, model expects {d}",
                s.global.cols(),
                s.local.cols()
            )));
        }
        if s.grid.len() != self.config.grid_points {
            return Err(Error::Config(format!(
                "sample has {} grid points, model expects {}",
                s.grid.len(),
                self.config.grid_points
            )));
        }
        Ok(())
    }

    /// Fused states `H̄` and their first and last rows.
    pub fn encode(&self, tape: &mut Tape, v: &[Var], s: &CascadeSample) -> Result<(Var, Var, Var)> {
        self.check_sample(s)?;
        let hbar = self.encoder.encode(tape, v, &s.global, &s.local, &s.times)?;
        let first = tape.row(hbar, 0)?;
        let last = tape.row(hbar, s.len() - 1)?;
        Ok((hbar, first, last))
    }

    /// `softplus(f_d([H̄_first; H̄_last; log2(trend + 1)]))`.
    pub fn decode(&self, tape: &mut Tape, v: &[Var], first: Var, last: Var, trend: Option<Var>) -> Result<Var> {
        let x = match trend {
            Some(t) => {
                let lt = tape.log2_1p(t)?;
                tape.concat(&[first, last, lt])?
            }
            None => tape.concat(&[first, last])?,
        };
        let pre = self.decoder.forward(tape, v, x)?;
        Ok(tape.softplus(pre))
    }

    /// Training path: posterior trend into the decoder. `noise` is shared by
    /// the prior and posterior draws.
    pub fn train_pass(&self, tape: &mut Tape, v: &[Var], s: &CascadeSample, noise: &[f64]) -> Result<TrainPass> {
        let (hbar, first, last) = self.encode(tape, v, s)?;
        let Some(tr) = &self.trend else {
            return Ok(TrainPass {
                prediction: self.decode(tape, v, first, last, None)?,
                prior: None,
                posterior: None,
                kl: None,
            });
        };
        let z_h = tr.pool_sequence(tape, v, hbar)?;
        let z_ctx = tr.pool_trajectory(tape, v, &s.context)?;
        let z_tgt = tr.pool_trajectory(tape, v, &s.target()?)?;
        let prior = tr.prior(tape, v, z_ctx, z_h)?;
        let post = tr.posterior(tape, v, z_tgt, z_h)?;
        let zp = tr.sample(tape, prior, noise)?;
        let zq = tr.sample(tape, post, noise)?;
        let solver = &self.config.trend_solver;
        let tp = tr.generate_trend(tape, v, zp, s.p_obs, s.t_obs, &s.grid, solver)?;
        let tq = tr.generate_trend(tape, v, zq, s.p_obs, s.t_obs, &s.grid, solver)?;
        let kl = kl_gaussians(tape, post, prior)?;
        let prediction = self.decode(tape, v, first, last, Some(tq.popularity))?;
        Ok(TrainPass {
            prediction,
            prior: Some(tp),
            posterior: Some(tq),
            kl: Some(kl),
        })
    }

    /// Total training loss of one sample.
    pub fn loss(&self, tape: &mut Tape, v: &[Var], s: &CascadeSample, noise: &[f64]) -> Result<LossParts> {
        let pass = self.train_pass(tape, v, s, noise)?;
        let main = main_loss(tape, pass.prediction, s.delta_p()?)?;
        let (Some(tp), Some(tq), Some(kl)) = (&pass.prior, &pass.posterior, pass.kl) else {
            return Ok(LossParts {
                total: main,
                main: tape.item(main),
                rg: 0.0,
                kl: 0.0,
                kd: 0.0,
                prediction: tape.value(pass.prediction).item(),
            });
        };
        let rg = regression_loss(tape, &[tp.popularity, tq.popularity], s.grid_values()?)?;
        let kd = kd_loss(tape, tp.last_latent(), tq.last_latent())?;
        let reg = tape.add(kl, kd)?;
        let total = tape.lin_comb(main, &[(self.config.lambda1, rg), (self.config.lambda2, reg)])?;
        Ok(LossParts {
            total,
            main: tape.item(main),
            rg: tape.item(rg),
            kl: tape.item(kl),
            kd: tape.item(kd),
            prediction: tape.value(pass.prediction).item(),
        })
    }

    /// Inference path: the prior mean drives the trend. Reads nothing past
    /// the observation time.
    pub fn predict_on(&self, tape: &mut Tape, v: &[Var], s: &CascadeSample) -> Result<(Var, Option<TrendOutput>)> {
        let (hbar, first, last) = self.encode(tape, v, s)?;
        let Some(tr) = &self.trend else {
            return Ok((self.decode(tape, v, first, last, None)?, None));
        };
        let z_h = tr.pool_sequence(tape, v, hbar)?;
        let z_ctx = tr.pool_trajectory(tape, v, &s.context)?;
        let prior = tr.prior(tape, v, z_ctx, z_h)?;
        let trend = tr.generate_trend(tape, v, prior.mean, s.p_obs, s.t_obs, &s.grid, &self.config.trend_solver)?;
        Ok((self.decode(tape, v, first, last, Some(trend.popularity))?, Some(trend)))
    }

    /// Predicted incremental popularity, with the prior trend if any.
    pub fn predict(&self, s: &CascadeSample) -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let v = self.bind_constants(&mut tape);
        let (pred, trend) = self.predict_on(&mut tape, &v, s)?;
        let trend = trend.map(|t| tape.value(t.popularity).data().to_vec());
        Ok((tape.value(pred).item(), trend))
    }

    /// Parameters as untracked leaves, for forward-only passes.
    pub fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// `(log2(ΔP + 1) - log2(ΔP̂ + 1))^2`.
pub fn main_loss(tape: &mut Tape, prediction: Var, delta_p: f64) -> Result<Var> {
    let lp = tape.log2_1p(prediction)?;
    let d = tape.add_scalar(lp, -log2_1p_const(delta_p));
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Mean squared log2 error of every generated trend against the truth.
pub fn regression_loss(tape: &mut Tape, trends: &[Var], truth: &[f64]) -> Result<Var> {
    let all = tape.concat(trends)?;
    let lp = tape.log2_1p(all)?;
    let target: Vec<f64> = trends.iter().flat_map(|_| truth.iter().map(|&p| log2_1p_const(p))).collect();
    if target.len() != tape.value(lp).len() {
        return Err(Error::shape(
            "regression_loss",
            format!("{} truths for {} values", target.len(), tape.value(lp).len()),
        ));
    }
    let t = tape.constant(Tensor::vector(target));
    let d = tape.sub(lp, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `L_main + λ1 L_rg + λ2 (L_kl + L_kd)` from plain values.
pub fn total_loss(main: f64, rg: f64, kl: f64, kd: f64, lambda1: f64, lambda2: f64) -> f64 {
    main + lambda1 * rg + lambda2 * (kl + kd)
}
