//! End to end: synthetic corpus, training with early stopping, checkpoint
//! round trip, and evaluation against simple baselines.
//!
//! Pass `notrend` to train the variant without the trend module.

use vnoip::baselines::{best_constant, rate_extrapolation};
use vnoip::checkpoint::Checkpoint;
use vnoip::embed::GlobalEmbedConfig;
use vnoip::metrics::msle;
use vnoip::model::{Model, ModelConfig, Variant};
use vnoip::pipeline::{prepare_synthetic, SplitConfig};
use vnoip::sample::SampleConfig;
use vnoip::synth::GenConfig;
use vnoip::train::{evaluate, train, TrainConfig};

fn main() -> vnoip::Result<()> {
    let variant = match std::env::args().nth(1) {
        Some(v) => v.parse()?,
        None => Variant::Full,
    };
    let gen = GenConfig::default();
    let t_o = 0.3 * gen.horizon;
    let sample = SampleConfig {
        t_o,
        t_p: gen.horizon,
        ..SampleConfig::default()
    };
    let split = SplitConfig {
        limit: Some(200),
        ..SplitConfig::default()
    };
    let data = prepare_synthetic(&gen, &split, &GlobalEmbedConfig::default(), &sample)?;
    println!("corpus {:?} (train, validation, test)", data.samples.sizes());

    let config = ModelConfig {
        hidden: 16,
        latent: 8,
        variant,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config.clone())?;
    let out = train(&mut model, &data.samples.train, &data.samples.val, &TrainConfig::default(), |r| {
        println!(
            "epoch {:>3}  loss {:.4}  train msle {:.4}  val msle {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_msle,
            r.val_msle,
            if r.improved { "  *" } else { "" }
        );
    })?;
    println!("best epoch {} of {}", out.best_epoch, out.history.len());

    let path = std::env::temp_dir().join("vnoip-train-eval.ckpt");
    out.checkpoint.save(&path)?;
    let mut restored = Model::new(config)?;
    Checkpoint::load(&path)?.apply(&mut restored.params)?;
    let report = evaluate(&restored, &data.samples.test)?;

    let labels: Vec<f64> = data.samples.train.iter().map(|s| s.delta_p()).collect::<vnoip::Result<_>>()?;
    let c = best_constant(&labels);
    let constant: Vec<(f64, f64)> = report.records.iter().map(|r| (r.truth, c)).collect();
    let rate: Vec<(f64, f64)> = data
        .cascades
        .test
        .iter()
        .map(|c| (c.increment(t_o, gen.horizon) as f64, rate_extrapolation(c, t_o, gen.horizon)))
        .collect();
    println!("\ntest msle {:.4}  mape {:.4}  ({variant:?})", report.msle, report.mape);
    println!("best constant {c:.3}: msle {:.4}", msle(&constant));
    println!("rate extrapolation: msle {:.4}", msle(&rate));
    for r in report.records.iter().take(5) {
        println!(
            "  cascade {:>5}: truth {:>3}  predicted {:>7.3}  trend {:.1?}",
            r.id,
            r.truth,
            r.predicted,
            r.trend.as_deref().unwrap_or(&[])
        );
    }
    Ok(())
}
