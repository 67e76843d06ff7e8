//! Corpus preparation shared by the command line, the examples and the
//! tests: generate, filter, split, embed and featurize.

use serde::{Deserialize, Serialize};

use crate::cascade::Cascade;
use crate::embed::{embed_global, EmbeddingTable, GlobalEmbedConfig, GlobalGraph};
use crate::error::Result;
use crate::sample::{build_samples, filter_and_split, CascadeSample, SampleConfig, MIN_PARTICIPANTS, SPLIT_RATIOS};
use crate::synth::{generate_synthetic, GenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub min_participants: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Keep only the first `limit` surviving cascades (by id) before
    /// splitting.
    pub limit: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            min_participants: MIN_PARTICIPANTS,
            ratios: SPLIT_RATIOS,
            seed: 42,
            limit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Filter, optional truncation, then the seeded split.
pub fn split_cascades(cascades: &[Cascade], t_o: f64, cfg: &SplitConfig) -> Result<Splits<Cascade>> {
    let mut kept: Vec<Cascade> = cascades
        .iter()
        .filter(|c| c.observed_participants(t_o) >= cfg.min_participants)
        .cloned()
        .collect();
    kept.sort_by_key(|c| c.id);
    if let Some(n) = cfg.limit {
        kept.truncate(n);
    }
    let [train, val, test] = filter_and_split(&kept, t_o, cfg.min_participants, cfg.ratios, cfg.seed)?;
    Ok(Splits { train, val, test })
}

pub fn featurize(splits: &Splits<Cascade>, global: &EmbeddingTable, cfg: &SampleConfig) -> Result<Splits<CascadeSample>> {
    Ok(Splits {
        train: build_samples(&splits.train, global, cfg)?,
        val: build_samples(&splits.val, global, cfg)?,
        test: build_samples(&splits.test, global, cfg)?,
    })
}

/// A synthetic corpus ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: GlobalGraph,
    pub global: EmbeddingTable,
    pub cascades: Splits<Cascade>,
    pub samples: Splits<CascadeSample>,
}

pub fn prepare_synthetic(gen: &GenConfig, split: &SplitConfig, embed: &GlobalEmbedConfig, sample: &SampleConfig) -> Result<Prepared> {
    let (graph, cascades) = generate_synthetic(gen)?;
    let cascades = split_cascades(&cascades, sample.t_o, split)?;
    let global = embed_global(&graph, embed)?;
    let samples = featurize(&cascades, &global, sample)?;
    Ok(Prepared {
        graph,
        global,
        cascades,
        samples,
    })
}
