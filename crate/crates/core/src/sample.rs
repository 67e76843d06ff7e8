//! Observation-window filtering, train/validation/test splitting, and
//! featurization of cascades into model-ready samples.
//!
//! Times inside a [`CascadeSample`] are normalized by the prediction
//! horizon, `t / t_p`, so every sample lives on `[0, 1]`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::Cascade;
use crate::embed::{embed_cascade, EmbeddingTable, GraphWaveConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_PARTICIPANTS: usize = 10;
pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// Drops cascades with fewer than `min_participants` participants at or
/// before `t_o`, shuffles the rest with `seed`, and cuts them by `ratios`.
/// The first two parts are rounded to the nearest cascade; the test part
/// takes the remainder.
pub fn filter_and_split(cascades: &[Cascade], t_o: f64, min_participants: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<Cascade>; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut kept: Vec<Cascade> = cascades
        .iter()
        .filter(|c| c.observed_participants(t_o) >= min_participants)
        .cloned()
        .collect();
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = kept.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let test = kept.split_off(n_train + n_val);
    let val = kept.split_off(n_train);
    Ok([kept, val, test])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Observation time, raw units since publication.
    pub t_o: f64,
    /// Prediction horizon, raw units since publication.
    pub t_p: f64,
    /// Future grid points.
    pub grid_points: usize,
    pub max_events: usize,
    pub graphwave: GraphWaveConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            t_o: 6.0,
            t_p: 20.0,
            grid_points: 8,
            max_events: 100,
            graphwave: GraphWaveConfig::default(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_o > 0.0) || !self.t_p.is_finite() {
            return Err(Error::Config(format!("observation time {} must be positive", self.t_o)));
        }
        if !(self.t_p > self.t_o) {
            return Err(Error::Horizon {
                t_o: self.t_o,
                t_p: self.t_p,
            });
        }
        if self.grid_points == 0 || self.max_events == 0 {
            return Err(Error::Config("grid_points and max_events must be positive".into()));
        }
        self.graphwave.points_per_scale()?;
        Ok(())
    }

    /// Raw grid times `t_o + k (t_p - t_o) / T`, `k = 1..=T`.
    pub fn raw_grid(&self) -> Vec<f64> {
        let step = (self.t_p - self.t_o) / self.grid_points as f64;
        (1..=self.grid_points)
            .map(|k| {
                if k == self.grid_points {
                    self.t_p
                } else {
                    self.t_o + k as f64 * step
                }
            })
            .collect()
    }
}

/// Post-observation labels. A sealed copy keeps the slot empty and counts
/// every read attempt in a counter shared with its siblings.
#[derive(Debug, Clone)]
pub struct Supervision {
    labels: Option<Labels>,
    reads: Arc<AtomicUsize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Labels {
    grid_values: Vec<f64>,
    delta_p: f64,
}

impl Supervision {
    fn labels(&self, what: &'static str) -> Result<&Labels> {
        match &self.labels {
            Some(l) => Ok(l),
            None => {
                self.reads.fetch_add(1, Ordering::Relaxed);
                Err(Error::Leak(what))
            }
        }
    }
}

/// A featurized cascade.
#[derive(Debug, Clone)]
pub struct CascadeSample {
    pub id: u64,
    /// Users of the encoded sequence, root first.
    pub users: Vec<u64>,
    /// Normalized times of the encoded sequence.
    pub times: Vec<f64>,
    /// Global-view rows `X^g[u_i]`, `n x d`.
    pub global: Tensor,
    /// Cascade-view GraphWave rows, `n x d`.
    pub local: Tensor,
    /// Context trajectory `(t, P(t))` at event times, ending at `t_o`.
    pub context: Vec<(f64, f64)>,
    /// Normalized observation time.
    pub t_obs: f64,
    /// Normalized future grid.
    pub grid: Vec<f64>,
    /// Observed popularity `P(t_o)`.
    pub p_obs: f64,
    supervision: Supervision,
}

impl CascadeSample {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// True popularity at the grid times.
    pub fn grid_values(&self) -> Result<&[f64]> {
        Ok(&self.supervision.labels("future grid popularity")?.grid_values)
    }

    /// Incremental popularity `P(t_p) - P(t_o)`.
    pub fn delta_p(&self) -> Result<f64> {
        Ok(self.supervision.labels("incremental popularity")?.delta_p)
    }

    /// Target trajectory: the context followed by the future grid.
    pub fn target(&self) -> Result<Vec<(f64, f64)>> {
        let values = self.grid_values()?;
        let mut out = self.context.clone();
        out.extend(self.grid.iter().copied().zip(values.iter().copied()));
        Ok(out)
    }

    /// Copy with labels removed, for inference.
    pub fn sealed(&self) -> Self {
        Self {
            supervision: Supervision {
                labels: None,
                reads: Arc::new(AtomicUsize::new(0)),
            },
            ..self.clone()
        }
    }

    pub fn is_sealed(&self) -> bool {
        self.supervision.labels.is_none()
    }

    /// Reads attempted on a sealed sample.
    pub fn leak_attempts(&self) -> usize {
        self.supervision.reads.load(Ordering::Relaxed)
    }
}

/// Featurizes one cascade. Events after `t_o` never reach the features;
/// the sequence keeps the root plus at most `max_events - 1` reposts.
pub fn build_sample(c: &Cascade, global: &EmbeddingTable, cfg: &SampleConfig) -> Result<CascadeSample> {
    cfg.validate()?;
    let scale = cfg.t_p;
    let observed: Vec<_> = c.events().iter().take_while(|e| e.time <= cfg.t_o).collect();

    let kept = &observed[..observed.len().min(cfg.max_events - 1)];
    let mut users = Vec::with_capacity(kept.len() + 1);
    let mut times = Vec::with_capacity(kept.len() + 1);
    users.push(c.root);
    times.push(0.0);
    let mut index: HashMap<u64, usize> = HashMap::from([(c.root, 0)]);
    let mut edges = Vec::with_capacity(kept.len());
    for e in kept {
        let i = users.len();
        edges.push((index[&e.parent], i));
        index.insert(e.user, i);
        users.push(e.user);
        times.push(e.time / scale);
    }

    let n = users.len();
    let d = global.dim();
    let mut g = Vec::with_capacity(n * d);
    for &u in &users {
        g.extend(global.row_or_zero(u));
    }
    let global_rows = Tensor::matrix(n, d, g)?;
    let wave = embed_cascade(n, &edges, &cfg.graphwave)?;
    let local = Tensor::matrix(n, wave.dim(), wave.data().to_vec())?;

    let t_obs = cfg.t_o / scale;
    let mut context: Vec<(f64, f64)> = times.iter().enumerate().map(|(i, &t)| (t, (i + 1) as f64)).collect();
    let p_obs = c.popularity_at(cfg.t_o) as f64;
    if context.last().is_some_and(|&(t, _)| t == t_obs) {
        context.last_mut().unwrap().1 = p_obs;
    } else {
        context.push((t_obs, p_obs));
    }

    let raw_grid = cfg.raw_grid();
    let grid_values = raw_grid.iter().map(|&t| c.popularity_at(t) as f64).collect();
    Ok(CascadeSample {
        id: c.id,
        users,
        times,
        global: global_rows,
        local,
        context,
        t_obs,
        grid: raw_grid.iter().map(|t| t / scale).collect(),
        p_obs,
        supervision: Supervision {
            labels: Some(Labels {
                grid_values,
                delta_p: c.increment(cfg.t_o, cfg.t_p) as f64,
            }),
            reads: Arc::new(AtomicUsize::new(0)),
        },
    })
}

/// Featurizes many cascades in parallel, keeping input order.
pub fn build_samples(cascades: &[Cascade], global: &EmbeddingTable, cfg: &SampleConfig) -> Result<Vec<CascadeSample>> {
    cascades.par_iter().map(|c| build_sample(c, global, cfg)).collect()
}
