//! The workflows behind the command-line tool. Each writes its metrics as
//! one JSON object per line to `out` and its artifacts under the data
//! directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{best_constant, rate_extrapolation};
use crate::cascade::{parse_dataset, write_dataset, Cascade};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::embed::{embed_global, EmbeddingTable, GlobalGraph};
use crate::error::{Error, Result};
use crate::gradsuite::run_suite;
use crate::metrics::msle;
use crate::model::Model;
use crate::pipeline::{featurize, split_cascades, Splits};
use crate::plot::{csv, line_chart, Series};
use crate::sample::CascadeSample;
use crate::synth::generate_synthetic;
use crate::train::{config_hash, evaluate, train, EpochRecord};

/// File layout of a data directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn graph(&self) -> PathBuf {
        self.dir.join("graph.tsv")
    }
    pub fn cascades(&self) -> PathBuf {
        self.dir.join("cascades.txt")
    }
    pub fn global(&self) -> PathBuf {
        self.dir.join("global.emb")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }
    pub fn predictions(&self) -> PathBuf {
        self.dir.join("predictions.jsonl")
    }
}

/// Fails with a not-found error naming `path` when it is absent.
fn need(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display())).into())
    }
}

fn emit(out: &mut dyn Write, v: Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(need(path.to_path_buf())?)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes a synthetic graph and corpus.
pub fn gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let p = Paths::new(&cfg.data_dir);
    fs::create_dir_all(&p.dir)?;
    let (graph, cascades) = generate_synthetic(&cfg.gen)?;
    graph.write_tsv(p.graph())?;
    write_dataset(p.cascades(), &cascades)?;
    let sizes: Vec<usize> = cascades.iter().map(Cascade::size).collect();
    let eligible = cascades
        .iter()
        .filter(|c| c.observed_participants(cfg.sample.t_o) >= cfg.split.min_participants)
        .count();
    emit(
        out,
        json!({
            "command": "gen",
            "users": graph.node_count(),
            "edges": graph.edges().len(),
            "cascades": cascades.len(),
            "eligible": eligible,
            "mean_size": sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
            "max_size": sizes.iter().max().copied().unwrap_or(0),
        }),
    )
}

/// Computes and stores the global embedding table.
pub fn embed(cfg: &RunConfig, out: &mut dyn Write) -> Result<EmbeddingTable> {
    let p = Paths::new(&cfg.data_dir);
    let graph = GlobalGraph::read_tsv(need(p.graph())?)?;
    let table = embed_global(&graph, &cfg.embed)?;
    table.save(p.global())?;
    emit(
        out,
        json!({"command": "embed", "rows": table.rows(), "dim": table.dim(), "path": p.global()}),
    )?;
    Ok(table)
}

/// The stored global table, computed first when absent.
fn global_table(cfg: &RunConfig, out: &mut dyn Write) -> Result<EmbeddingTable> {
    let p = Paths::new(&cfg.data_dir);
    if !p.global().exists() {
        return embed(cfg, out);
    }
    let table = EmbeddingTable::load(p.global())?;
    if table.dim() != cfg.model.embed_dim {
        return Err(Error::Config(format!(
            "stored global embedding is {} wide but embed_dim = {}; rerun embed",
            table.dim(),
            cfg.model.embed_dim
        )));
    }
    Ok(table)
}

/// Reads, filters, splits and featurizes the stored corpus.
pub fn load_corpus(cfg: &RunConfig, out: &mut dyn Write) -> Result<(Splits<Cascade>, Splits<CascadeSample>)> {
    let p = Paths::new(&cfg.data_dir);
    let cascades = parse_dataset(need(p.cascades())?)?;
    let splits = split_cascades(&cascades, cfg.sample.t_o, &cfg.split)?;
    let global = global_table(cfg, out)?;
    let samples = featurize(&splits, &global, &cfg.sample)?;
    Ok((splits, samples))
}

/// Trains, then stores the checkpoint, the history and the resolved config.
pub fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let p = Paths::new(&cfg.data_dir);
    let (_, samples) = load_corpus(cfg, out)?;
    let (ntr, nva, nte) = samples.sizes();
    emit(
        out,
        json!({"command": "train", "train": ntr, "val": nva, "test": nte, "variant": cfg.model.variant}),
    )?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut io: Result<()> = Ok(());
    let outcome = train(&mut model, &samples.train, &samples.val, &cfg.train, |r: &EpochRecord| {
        if io.is_ok() {
            io = emit(
                out,
                json!({"epoch": r.epoch, "train_loss": r.train_loss, "train_msle": r.train_msle, "val_msle": r.val_msle, "improved": r.improved}),
            );
        }
    })?;
    io?;
    outcome.checkpoint.save(p.checkpoint())?;
    write_lines(&p.history(), &outcome.history)?;
    fs::write(p.config(), cfg.to_text())?;
    emit(
        out,
        json!({
            "best_epoch": outcome.best_epoch,
            "best_val_msle": outcome.checkpoint.best_val_msle,
            "epochs": outcome.history.len(),
            "stopped_early": outcome.stopped_early,
            "config_hash": outcome.checkpoint.hash_hex(),
            "checkpoint": p.checkpoint(),
        }),
    )
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: u64,
    pub truth: f64,
    pub predicted: f64,
    /// Normalized grid times.
    pub grid: Vec<f64>,
    pub truth_grid: Vec<f64>,
    pub trend: Option<Vec<f64>>,
}

/// Scores the stored checkpoint on the test split, next to the constant
/// and rate-extrapolation baselines.
pub fn eval_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let p = Paths::new(&cfg.data_dir);
    let (cascades, samples) = load_corpus(cfg, out)?;
    let ckpt = Checkpoint::load(need(p.checkpoint())?)?;
    let mut model = Model::new(cfg.model.clone())?;
    ckpt.apply(&mut model.params)?;
    let report = evaluate(&model, &samples.test)?;

    let labels = samples.train.iter().map(CascadeSample::delta_p).collect::<Result<Vec<_>>>()?;
    let c = best_constant(&labels);
    let truth: Vec<f64> = report.records.iter().map(|r| r.truth).collect();
    let constant_msle = msle(&truth.iter().map(|&y| (y, c)).collect::<Vec<_>>());
    let (t_o, t_p) = (cfg.sample.t_o, cfg.sample.t_p);
    let rate_pairs: Vec<(f64, f64)> = cascades
        .test
        .iter()
        .map(|c| (c.increment(t_o, t_p) as f64, rate_extrapolation(c, t_o, t_p)))
        .collect();

    let mut by_id: Vec<&CascadeSample> = samples.test.iter().collect();
    by_id.sort_by_key(|s| s.id);
    let lines = report
        .records
        .iter()
        .zip(by_id)
        .map(|(r, s)| {
            Ok(PredictionLine {
                id: r.id,
                truth: r.truth,
                predicted: r.predicted,
                grid: s.grid.clone(),
                truth_grid: s.grid_values()?.to_vec(),
                trend: r.trend.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_lines(&p.predictions(), &lines)?;
    emit(
        out,
        json!({
            "command": "eval",
            "n": report.records.len(),
            "msle": report.msle,
            "mape": report.mape,
            "constant_msle": constant_msle,
            "rate_msle": msle(&rate_pairs),
            "checkpoint_epoch": ckpt.epoch,
            "config_match": ckpt.config_hash == config_hash(&cfg.model, &cfg.train),
        }),
    )
}

/// Runs the gradient-check suite; fails when any check exceeds its
/// tolerance.
pub fn gradcheck_cmd(out: &mut dyn Write) -> Result<()> {
    let checks = run_suite()?;
    for c in &checks {
        emit(out, serde_json::to_value(c).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    emit(out, json!({"command": "gradcheck", "checks": checks.len(), "failed": failed}))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

/// Most test cascades drawn in the trend figure.
pub const TREND_PLOT_CASCADES: usize = 4;

/// Loss-curve and trend CSV tables plus their SVG renderings.
pub fn plot_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let p = Paths::new(&cfg.data_dir);
    let history: Vec<EpochRecord> = read_lines(&p.history())?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_msle.to_string(),
                r.val_msle.to_string(),
            ]
        })
        .collect();
    fs::write(
        p.dir.join("loss_curve.csv"),
        csv(&["epoch", "train_loss", "train_msle", "val_msle"], &rows),
    )?;
    let curve = |name: &str, f: fn(&EpochRecord) -> f64, dashed| Series {
        name: name.into(),
        points: history.iter().map(|r| (r.epoch as f64, f(r))).collect(),
        dashed,
    };
    let series = [
        curve("train loss", |r| r.train_loss, false),
        curve("train MSLE", |r| r.train_msle, true),
        curve("val MSLE", |r| r.val_msle, false),
    ];
    fs::write(
        p.dir.join("loss_curve.svg"),
        line_chart("Training curves", "epoch", "value", &series),
    )?;

    let preds: Vec<PredictionLine> = read_lines(&p.predictions())?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for pl in &preds {
        for (k, (&t, &truth)) in pl.grid.iter().zip(&pl.truth_grid).enumerate() {
            let trend = pl.trend.as_ref().map_or(String::new(), |tr| tr[k].to_string());
            rows.push(vec![pl.id.to_string(), t.to_string(), truth.to_string(), trend]);
        }
    }
    for pl in preds.iter().filter(|pl| pl.trend.is_some()).take(TREND_PLOT_CASCADES) {
        let trend = pl.trend.as_ref().expect("filtered");
        series.push(Series {
            name: format!("#{} truth", pl.id),
            points: pl.grid.iter().copied().zip(pl.truth_grid.iter().copied()).collect(),
            dashed: true,
        });
        series.push(Series {
            name: format!("#{} trend", pl.id),
            points: pl.grid.iter().copied().zip(trend.iter().copied()).collect(),
            dashed: false,
        });
    }
    fs::write(p.dir.join("trends.csv"), csv(&["id", "t", "truth", "trend"], &rows))?;
    fs::write(
        p.dir.join("trends.svg"),
        line_chart("Generated trends vs truth", "normalized time", "popularity", &series),
    )?;
    emit(
        out,
        json!({"command": "plot", "epochs": history.len(), "cascades": preds.len(), "dir": p.dir}),
    )
}
