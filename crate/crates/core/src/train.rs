//! Mini-batch training with early stopping, and leak-guarded evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{mape, msle};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::sample::CascadeSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Seeds shuffling and latent noise.
    pub seed: u64,
    /// Draw latent noise during training; off means both draws sit at
    /// their means.
    pub latent_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr: 2e-3,
            patience: 15,
            max_epochs: 300,
            seed: 42,
            latent_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// SHA-256 over the JSON form of both configurations.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> [u8; 32] {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    Sha256::digest(text.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the training set.
    pub train_loss: f64,
    /// MSLE of the training-path predictions.
    pub train_msle: f64,
    pub val_msle: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// True when patience ran out before the epoch cap.
    pub stopped_early: bool,
}

/// Standard-normal noise for one cascade in one epoch.
pub fn latent_noise(seed: u64, epoch: usize, cascade: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(cascade);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

struct Step {
    id: u64,
    total: f64,
    main: f64,
    rg: f64,
    kl: f64,
    kd: f64,
    prediction: f64,
    truth: f64,
    grads: Vec<Option<Tensor>>,
}

fn sample_step(model: &Model, s: &CascadeSample, noise: &[f64]) -> Result<Step> {
    let mut tape = Tape::new();
    let v = model.params.bind(&mut tape);
    let parts = model.loss(&mut tape, &v, s, noise)?;
    let total = tape.item(parts.total);
    let step = |grads| Step {
        id: s.id,
        total,
        main: parts.main,
        rg: parts.rg,
        kl: parts.kl,
        kd: parts.kd,
        prediction: parts.prediction,
        truth: s.delta_p().unwrap_or(f64::NAN),
        grads,
    };
    if !total.is_finite() {
        return Ok(step(Vec::new()));
    }
    let mut g = tape.backward(parts.total)?;
    let grads: Vec<Option<Tensor>> = v.iter().map(|&x| g.take(x)).collect();
    if let Some(slot) = grads.iter().position(|g| g.as_ref().is_some_and(|t| !t.all_finite())) {
        return Err(Error::NonFinite(format!(
            "cascade {}: gradient of {} (loss {total})",
            s.id,
            model.params.names()[slot]
        )));
    }
    Ok(step(grads))
}

/// Gradient of the mean training loss over `batch` plus the per-sample
/// records. Results are merged in batch order.
fn batch_gradient(model: &Model, batch: &[&CascadeSample], cfg: &TrainConfig, epoch: usize) -> Result<(Vec<Option<Tensor>>, Vec<Step>)> {
    let latent = model.config.latent;
    let steps: Vec<Step> = batch
        .par_iter()
        .map(|s| {
            let noise = if cfg.latent_noise {
                latent_noise(cfg.seed, epoch, s.id, latent)
            } else {
                vec![0.0; latent]
            };
            sample_step(model, s, &noise).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, {msg}")),
                e @ Error::Domain { .. } => Error::NonFinite(format!("epoch {epoch}, cascade {}: {e}", s.id)),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = steps.iter().find(|s| !s.total.is_finite()) {
        return Err(Error::NonFinite(format!(
            "epoch {epoch}, cascade {}: loss {} (main {}, rg {}, kl {}, kd {}, prediction {})",
            bad.id, bad.total, bad.main, bad.rg, bad.kl, bad.kd, bad.prediction
        )));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
    for s in &steps {
        for (acc, g) in sum.iter_mut().zip(&s.grads) {
            if let Some(g) = g {
                let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, x) in acc.iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
    }
    let grads = sum
        .into_iter()
        .zip(model.params.tensors())
        .map(|(acc, p)| acc.map(|a| Tensor::new(p.shape().to_vec(), a.into_iter().map(|x| x * inv).collect()).expect("shape")))
        .collect();
    Ok((grads, steps))
}

/// Trains `model` in place and leaves it holding the best parameters seen
/// on the validation set. `on_epoch` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[CascadeSample],
    val_set: &[CascadeSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let hash = config_hash(&model.config, cfg);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ModelParams)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let (mut loss_sum, mut pairs) = (0.0, Vec::with_capacity(train_set.len()));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&CascadeSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (grads, steps) = batch_gradient(model, &batch, cfg, epoch)?;
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            for s in steps {
                loss_sum += s.total;
                pairs.push((s.truth, s.prediction));
            }
        }
        let val = evaluate(model, val_set)?.msle;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val < *b);
        if improved {
            best = Some((val, epoch, model.params.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_msle: msle(&pairs),
            val_msle: val,
            improved,
        };
        on_epoch(&record);
        history.push(record);
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_val, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_params(&model.params, best_epoch as u64, best_val, hash),
        history,
        best_epoch,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: u64,
    pub truth: f64,
    pub predicted: f64,
    /// Prior trend at the grid times, when the model has one.
    pub trend: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub msle: f64,
    pub mape: f64,
    /// Sorted by cascade id.
    pub records: Vec<PredictionRecord>,
}

/// Predicts every sample from a label-free copy and scores the result.
/// Fails with a leak error if the model tried to read any label.
pub fn evaluate(model: &Model, samples: &[CascadeSample]) -> Result<EvalReport> {
    let mut records: Vec<PredictionRecord> = samples
        .par_iter()
        .map(|s| {
            let sealed = s.sealed();
            let out = model.predict(&sealed);
            if sealed.leak_attempts() > 0 {
                return Err(Error::Leak("label read during inference"));
            }
            let (predicted, trend) = out?;
            Ok(PredictionRecord {
                id: s.id,
                truth: s.delta_p()?,
                predicted,
                trend,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.id);
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.truth, r.predicted)).collect();
    Ok(EvalReport {
        msle: msle(&pairs),
        mape: mape(&pairs),
        records,
    })
}
