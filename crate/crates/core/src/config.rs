//! Flat `key = value` run configuration.
//!
//! The same keys are accepted from a config file and from `--key value`
//! command-line pairs; pairs are applied after the file, so they win.
//! Lines starting with `#` and blank lines are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::GlobalEmbedConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::SplitConfig;
use crate::sample::SampleConfig;
use crate::synth::GenConfig;
use crate::train::TrainConfig;

/// Names the default data directory when `data_dir` is not configured.
pub const DATA_DIR_ENV: &str = "VNOIP_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub gen: GenConfig,
    pub split: SplitConfig,
    pub embed: GlobalEmbedConfig,
    pub sample: SampleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            gen: GenConfig::default(),
            split: SplitConfig::default(),
            embed: GlobalEmbedConfig::default(),
            sample: SampleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data_dir", "directory for corpora, embeddings, checkpoints and outputs"),
    ("users", "synthetic graph size"),
    ("attachment_exponent", "preferential attachment exponent"),
    ("edges_per_node", "edges added per new node"),
    ("base_rate", "cascade publication rate"),
    ("branching", "mean direct offspring per participant (< 1)"),
    ("decay", "exponential decay of the excitation kernel"),
    ("horizon", "generation horizon"),
    ("cascades", "number of generated cascades"),
    ("gen_seed", "generator seed"),
    ("min_participants", "observed-participant threshold"),
    ("split", "train,val,test ratios"),
    ("split_seed", "split shuffle seed"),
    ("limit", "keep at most this many surviving cascades (0 = all)"),
    ("embed_window", "random-walk window of the global embedding"),
    ("embed_negative", "negative-sampling shift of the global embedding"),
    ("embed_dim", "width of both embedding views"),
    ("graphwave_scales", "comma-separated heat-kernel scales"),
    ("graphwave_t_max", "largest characteristic-function sample point"),
    ("t_o", "observation time"),
    ("t_p", "prediction horizon"),
    ("grid_points", "future grid points T"),
    ("max_events", "sequence length cap"),
    ("hidden", "sequence state width"),
    ("latent", "latent state width"),
    ("lambda1", "trend regression weight"),
    ("lambda2", "KL and distillation weight"),
    ("euler_step", "sequence drift step, normalized time"),
    ("rtol", "trend solver relative tolerance"),
    ("atol", "trend solver absolute tolerance"),
    ("max_steps", "solver step budget"),
    ("variant", "full | notrend"),
    ("init_seed", "parameter initialization seed"),
    ("batch_size", "cascades per optimizer step"),
    ("lr", "Adam learning rate"),
    ("patience", "epochs without validation gain before stopping"),
    ("max_epochs", "epoch cap"),
    ("seed", "shuffle and latent-noise seed"),
    ("latent_noise", "sample latent noise in training (true | false)"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "users" => self.gen.users = parse(key, v)?,
            "attachment_exponent" => self.gen.attachment_exponent = parse(key, v)?,
            "edges_per_node" => self.gen.edges_per_node = parse(key, v)?,
            "base_rate" => self.gen.base_rate = parse(key, v)?,
            "branching" => self.gen.branching = parse(key, v)?,
            "decay" => self.gen.decay = parse(key, v)?,
            "horizon" => self.gen.horizon = parse(key, v)?,
            "cascades" => self.gen.cascades = parse(key, v)?,
            "gen_seed" => self.gen.seed = parse(key, v)?,
            "min_participants" => self.split.min_participants = parse(key, v)?,
            "split" => {
                let parts = v.split(',').map(|x| parse::<f64>(key, x.trim())).collect::<Result<Vec<_>>>()?;
                self.split.ratios = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("split needs three ratios, got {v:?}")))?;
            }
            "split_seed" => self.split.seed = parse(key, v)?,
            "limit" => {
                let n: usize = parse(key, v)?;
                self.split.limit = (n > 0).then_some(n);
            }
            "embed_window" => self.embed.window = parse(key, v)?,
            "embed_negative" => self.embed.negative = parse(key, v)?,
            "embed_dim" => {
                let d = parse(key, v)?;
                self.embed.dim = d;
                self.sample.graphwave.dim = d;
                self.model.embed_dim = d;
            }
            "graphwave_scales" => {
                self.sample.graphwave.scales = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
            }
            "graphwave_t_max" => self.sample.graphwave.t_max = parse(key, v)?,
            "t_o" => self.sample.t_o = parse(key, v)?,
            "t_p" => self.sample.t_p = parse(key, v)?,
            "grid_points" => {
                let t = parse(key, v)?;
                self.sample.grid_points = t;
                self.model.grid_points = t;
            }
            "max_events" => self.sample.max_events = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "latent" => self.model.latent = parse(key, v)?,
            "lambda1" => self.model.lambda1 = parse(key, v)?,
            "lambda2" => self.model.lambda2 = parse(key, v)?,
            "euler_step" => self.model.euler_step = parse(key, v)?,
            "rtol" => self.model.trend_solver.rtol = parse(key, v)?,
            "atol" => self.model.trend_solver.atol = parse(key, v)?,
            "max_steps" => self.model.trend_solver.max_steps = parse(key, v)?,
            "variant" => self.model.variant = parse(key, v)?,
            "init_seed" => self.model.init_seed = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "latent_noise" => self.train.latent_noise = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.apply_str(&fs::read_to_string(path)?)
    }

    /// Applies `--key value` pairs; `--key=value` is accepted too.
    pub fn apply_flags<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(a) = it.next() {
            let key = a
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {a:?}")))?;
            match key.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                    self.set(key, v)?;
                }
            }
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the flags.
    pub fn load<S: AsRef<str>>(file: Option<&Path>, flags: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        cfg.apply_flags(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.sample.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.grid_points != self.sample.grid_points || self.model.embed_dim != self.sample.graphwave.dim {
            return Err(Error::Config("model and sample settings disagree".into()));
        }
        if self.embed.dim != self.model.embed_dim {
            return Err(Error::Config("global and cascade embeddings must share embed_dim".into()));
        }
        Ok(())
    }

    /// Renders every key in file syntax.
    pub fn to_text(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let variant = serde_json::to_value(self.model.variant).expect("variant serializes");
        let pairs: Vec<(&str, String)> = vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("users", self.gen.users.to_string()),
            ("attachment_exponent", self.gen.attachment_exponent.to_string()),
            ("edges_per_node", self.gen.edges_per_node.to_string()),
            ("base_rate", self.gen.base_rate.to_string()),
            ("branching", self.gen.branching.to_string()),
            ("decay", self.gen.decay.to_string()),
            ("horizon", self.gen.horizon.to_string()),
            ("cascades", self.gen.cascades.to_string()),
            ("gen_seed", self.gen.seed.to_string()),
            ("min_participants", self.split.min_participants.to_string()),
            ("split", join(&self.split.ratios)),
            ("split_seed", self.split.seed.to_string()),
            ("limit", self.split.limit.unwrap_or(0).to_string()),
            ("embed_window", self.embed.window.to_string()),
            ("embed_negative", self.embed.negative.to_string()),
            ("embed_dim", self.model.embed_dim.to_string()),
            ("graphwave_scales", join(&self.sample.graphwave.scales)),
            ("graphwave_t_max", self.sample.graphwave.t_max.to_string()),
            ("t_o", self.sample.t_o.to_string()),
            ("t_p", self.sample.t_p.to_string()),
            ("grid_points", self.sample.grid_points.to_string()),
            ("max_events", self.sample.max_events.to_string()),
            ("hidden", self.model.hidden.to_string()),
            ("latent", self.model.latent.to_string()),
            ("lambda1", self.model.lambda1.to_string()),
            ("lambda2", self.model.lambda2.to_string()),
            ("euler_step", self.model.euler_step.to_string()),
            ("rtol", self.model.trend_solver.rtol.to_string()),
            ("atol", self.model.trend_solver.atol.to_string()),
            ("max_steps", self.model.trend_solver.max_steps.to_string()),
            ("variant", variant.as_str().unwrap_or("full").to_string()),
            ("init_seed", self.model.init_seed.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("lr", self.train.lr.to_string()),
            ("patience", self.train.patience.to_string()),
            ("max_epochs", self.train.max_epochs.to_string()),
            ("seed", self.train.seed.to_string()),
            ("latent_noise", self.train.latent_noise.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
