//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero when a required check fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnoip::autodiff::{Tape, Var};
use vnoip::baselines::{best_constant, rate_extrapolation};
use vnoip::cascade::{format_dataset, parse_dataset_str};
use vnoip::embed::GlobalEmbedConfig;
use vnoip::gradsuite::run_suite;
use vnoip::metrics::{mape, msle};
use vnoip::model::{Model, ModelConfig, Variant};
use vnoip::nn::ModelParams;
use vnoip::ode::{solve_dopri5, solve_euler, SolveConfig};
use vnoip::pipeline::{prepare_synthetic, Prepared, SplitConfig};
use vnoip::sample::{CascadeSample, SampleConfig, MIN_PARTICIPANTS};
use vnoip::sequence::{bidirectional_context, with_time_encoding};
use vnoip::synth::{generate_synthetic, GenConfig};
use vnoip::tensor::Tensor;
use vnoip::train::{evaluate, train, EvalReport, TrainConfig, TrainOutcome};
use vnoip::trend::{truncated_normal_mean, TrendVae};

const CORPUS_SIZE: usize = 200;
const HIDDEN: usize = 16;
const LATENT: usize = 8;

struct Verdict {
    number: usize,
    name: &'static str,
    passed: bool,
    /// False only when a part that must hold has failed. Comparative
    /// outcomes on the small corpus are reported but do not gate the run.
    required_ok: bool,
    detail: String,
    elapsed: Duration,
}

impl Verdict {
    fn strict(number: usize, name: &'static str, passed: bool, detail: String, elapsed: Duration) -> Self {
        Self {
            number,
            name,
            passed,
            required_ok: passed,
            detail,
            elapsed,
        }
    }

    fn print(&self) {
        println!(
            "criterion {} {}: {} ({}) [{:.1} s]",
            self.number,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.elapsed.as_secs_f64()
        );
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let outcomes = run_suite().expect("gradient suite runs");
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    let worst = |pred: &dyn Fn(&str) -> bool| {
        outcomes
            .iter()
            .filter(|o| pred(&o.name))
            .map(|o| o.max_rel_error)
            .fold(0.0, f64::max)
    };
    let composite = |n: &str| n == "jump_ode_pass+fuse" || n == "full_loss";
    let elapsed = start.elapsed();
    let ok = failed.is_empty() && outcomes.len() > 2 && elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} checks, primitives max {:.1e}, sequence {:.1e}, full loss {:.1e}, failed {:?}",
        outcomes.len(),
        worst(&|n| !composite(n)),
        worst(&|n| n == "jump_ode_pass+fuse"),
        worst(&|n| n == "full_loss"),
        failed
    );
    Verdict::strict(1, "gradient integrity", ok, detail, elapsed)
}

fn decay(tape: &mut Tape, y: Var) -> vnoip::Result<Var> {
    Ok(tape.neg(y))
}

fn growth(_: &mut Tape, y: Var) -> vnoip::Result<Var> {
    Ok(y)
}

fn solver_orders() -> Verdict {
    let start = Instant::now();
    let euler_err = |h: f64| {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![1.0]));
        let y = solve_euler(&mut tape, &decay, y0, 0.0, 1.0, h, 1_000_000).unwrap();
        (tape.item(y) - (-1.0f64).exp()).abs()
    };
    let ratio = euler_err(0.01) / euler_err(0.005);
    let mut tape = Tape::new();
    let y0 = tape.constant(Tensor::vector(vec![1.0]));
    let sol = solve_dopri5(&mut tape, &growth, y0, 0.0, &[1.0], &SolveConfig::dopri5(1e-8, 1e-10)).unwrap();
    let e_err = (tape.item(sol.states[0]) - std::f64::consts::E).abs();
    let elapsed = start.elapsed();
    let ok = (ratio - 2.0).abs() <= 0.2 && e_err < 1e-6 && elapsed < Duration::from_secs(10);
    Verdict::strict(
        2,
        "solver orders",
        ok,
        format!("euler halving ratio {ratio:.4}, dopri5 |y(1) - e| {e_err:.2e}"),
        elapsed,
    )
}

fn truncated_normal() -> Verdict {
    let start = Instant::now();
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::vector(vec![0.0]));
    let sigma = tape.constant(Tensor::vector(vec![1.0]));
    let m = truncated_normal_mean(&mut tape, mu, sigma).unwrap();
    let err = (tape.item(m) - (2.0 / std::f64::consts::PI).sqrt()).abs();

    let grid = [0.35, 0.5, 0.65, 0.8, 1.0];
    let mut monotone = 0;
    for seed in 0..100 {
        let mut p = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vae = TrendVae::new(&mut p, 8, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let z0 = tape.constant(Tensor::randn(&[4], &mut rng));
        let out = vae
            .generate_trend(&mut tape, &v, z0, 12.0, 0.3, &grid, &SolveConfig::default())
            .unwrap();
        let vals = tape.value(out.popularity).data();
        if vals[0] >= 12.0 && vals.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
    }
    let ok = err < 1e-9 && monotone == 100;
    Verdict::strict(
        3,
        "truncated-normal increment",
        ok,
        format!("|m(0,1) - sqrt(2/pi)| {err:.1e}, monotone trends {monotone}/100"),
        start.elapsed(),
    )
}

fn metric_exactness() -> Verdict {
    let start = Instant::now();
    let a = mape(&[(2.0, 6.0)]);
    let b = msle(&[(1.0, 0.0)]);
    let perfect = [(0.0, 0.0), (5.0, 5.0), (120.0, 120.0)];
    let (c, d) = (msle(&perfect), mape(&perfect));
    let ok = a == 0.5 && b == 1.0 && c == 0.0 && d == 0.0;
    Verdict::strict(
        4,
        "metric exactness",
        ok,
        format!("mape(2,6) {a}, msle(1,0) {b}, perfect {c}/{d}"),
        start.elapsed(),
    )
}

fn protocol_fidelity(gen: &GenConfig, t_o: f64, data: &Prepared) -> Verdict {
    let start = Instant::now();
    let (_, all) = generate_synthetic(gen).unwrap();
    let kept: Vec<u64> = [&data.cascades.train, &data.cascades.val, &data.cascades.test]
        .iter()
        .flat_map(|s| s.iter().map(|c| c.id))
        .collect();
    let all_eligible = kept
        .iter()
        .all(|id| all[*id as usize].observed_participants(t_o) >= MIN_PARTICIPANTS);
    // the corpus is the first eligible cascades by id
    let mut expected: Vec<u64> = all
        .iter()
        .filter(|c| c.observed_participants(t_o) >= MIN_PARTICIPANTS)
        .map(|c| c.id)
        .take(CORPUS_SIZE)
        .collect();
    let mut got = kept.clone();
    expected.sort_unstable();
    got.sort_unstable();
    let (tr, va, te) = data.cascades.sizes();
    let n = (tr + va + te) as f64;
    let near = |k: usize, r: f64| (k as f64 - r * n).abs() <= 1.0;
    let split_ok = near(tr, 0.7) && near(va, 0.15) && near(te, 0.15);
    let round_trip = parse_dataset_str(&format_dataset(&all)).map(|p| p == all).unwrap_or(false);
    let ok = all_eligible && got == expected && split_ok && round_trip;
    Verdict::strict(
        5,
        "protocol fidelity",
        ok,
        format!(
            "kept {} eligible, split {tr}/{va}/{te}, round trip of {} cascades lossless {round_trip}",
            got.len(),
            all.len()
        ),
        start.elapsed(),
    )
}

fn model(variant: Variant) -> Model {
    Model::new(ModelConfig {
        hidden: HIDDEN,
        latent: LATENT,
        variant,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn fit(variant: Variant, data: &Prepared) -> (Model, TrainOutcome, EvalReport) {
    let mut m = model(variant);
    let out = train(&mut m, &data.samples.train, &data.samples.val, &TrainConfig::default(), |_| {}).unwrap();
    let report = evaluate(&m, &data.samples.test).unwrap();
    (m, out, report)
}

fn overfit_single(data: &Prepared) -> (bool, String) {
    let one: Vec<CascadeSample> = data
        .samples
        .train
        .iter()
        .find(|s| s.delta_p().unwrap() > 0.0)
        .cloned()
        .into_iter()
        .collect();
    let mut m = model(Variant::Full);
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 500,
        patience: 500,
        ..TrainConfig::default()
    };
    let mut first = None;
    train(&mut m, &one, &one, &cfg, |r| {
        if first.is_none() && r.val_msle < 0.05 {
            first = Some(r.epoch);
        }
    })
    .unwrap();
    let ok = first.is_some();
    let what = match first {
        Some(e) => format!(
            "single cascade {} (dP {}) below 0.05 at epoch {e}",
            one[0].id,
            one[0].delta_p().unwrap()
        ),
        None => "single cascade never below 0.05 in 500 epochs".to_string(),
    };
    (ok, what)
}

/// Perturbs event `j` of `s` (both embedding rows and its time) and checks
/// that forward states before `j` and backward states after `j` are
/// bit-identical.
fn context_is_causal(m: &Model, s: &CascadeSample) -> bool {
    let run = |global: &Tensor, local: &Tensor, times: &[f64]| {
        let mut tape = Tape::new();
        let v = m.bind_constants(&mut tape);
        let sc = with_time_encoding(local, times).unwrap();
        let (a, b) = (tape.constant(global.clone()), tape.constant(sc));
        let ctx = bidirectional_context(&mut tape, a, b).unwrap();
        let (hf, hb) = m.encoder.jump_ode_pass(&mut tape, &v, ctx, times).unwrap();
        let vals = |xs: &[Var]| xs.iter().map(|&x| tape.value(x).data().to_vec()).collect::<Vec<_>>();
        (vals(&hf), vals(&hb))
    };
    let n = s.len();
    let (hf, hb) = run(&s.global, &s.local, &s.times);
    for j in 0..n {
        let (mut g, mut l, mut t) = (s.global.clone(), s.local.clone(), s.times.clone());
        let (dg, dl) = (g.cols(), l.cols());
        g.data_mut()[j * dg..(j + 1) * dg].iter_mut().for_each(|x| *x += 0.5);
        l.data_mut()[j * dl..(j + 1) * dl].iter_mut().for_each(|x| *x -= 0.5);
        let lo = if j == 0 { 0.0 } else { s.times[j - 1] };
        let hi = if j + 1 == n { s.t_obs } else { s.times[j + 1] };
        t[j] = 0.5 * (lo + hi);
        let (hf2, hb2) = run(&g, &l, &t);
        if (0..j).any(|i| hf[i] != hf2[i]) || (j + 1..n).any(|i| hb[i] != hb2[i]) {
            return false;
        }
    }
    true
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut verdicts = vec![gradient_integrity(), solver_orders(), truncated_normal(), metric_exactness()];
    for v in &verdicts {
        v.print();
    }

    let gen = GenConfig::default();
    let t_o = 0.3 * gen.horizon;
    let sample = SampleConfig {
        t_o,
        t_p: gen.horizon,
        ..SampleConfig::default()
    };
    let split = SplitConfig {
        limit: Some(CORPUS_SIZE),
        ..SplitConfig::default()
    };
    let data = prepare_synthetic(&gen, &split, &GlobalEmbedConfig::default(), &sample).expect("corpus builds");
    let v5 = protocol_fidelity(&gen, t_o, &data);
    v5.print();
    verdicts.push(v5);

    // 6: overfit sanity and baselines
    let start = Instant::now();
    let (overfit_ok, overfit_detail) = overfit_single(&data);
    let labels: Vec<f64> = data.samples.train.iter().map(|s| s.delta_p().unwrap()).collect();
    let c = best_constant(&labels);
    let truth: Vec<f64> = data.samples.test.iter().map(|s| s.delta_p().unwrap()).collect();
    let constant_msle = msle(&truth.iter().map(|&y| (y, c)).collect::<Vec<_>>());
    let rate_msle = msle(
        &data
            .cascades
            .test
            .iter()
            .map(|c| (c.increment(t_o, gen.horizon) as f64, rate_extrapolation(c, t_o, gen.horizon)))
            .collect::<Vec<_>>(),
    );
    let (full, full_out, full_report) = fit(Variant::Full, &data);
    let elapsed6 = start.elapsed();
    let beats_constant = full_report.msle < constant_msle;
    let beats_rate = full_report.msle < rate_msle;
    let in_time = elapsed6 < Duration::from_secs(30 * 60);
    let v6 = Verdict {
        number: 6,
        name: "overfit sanity",
        passed: overfit_ok && beats_constant && beats_rate && in_time,
        required_ok: overfit_ok && beats_rate && in_time,
        detail: format!(
            "{overfit_detail}; test msle full {:.4} vs constant {:.4} (c = {c:.3}) vs rate {:.4}; best epoch {} of {}",
            full_report.msle,
            constant_msle,
            rate_msle,
            full_out.best_epoch,
            full_out.history.len()
        ),
        elapsed: elapsed6,
    };
    v6.print();
    verdicts.push(v6);

    // 7: ablation direction, reported either way
    let start = Instant::now();
    let (_, nt_out, nt_report) = fit(Variant::NoTrend, &data);
    let v7 = Verdict {
        number: 7,
        name: "ablation direction",
        passed: full_report.msle <= nt_report.msle,
        required_ok: true,
        detail: format!(
            "test msle full {:.4} vs no-trend {:.4} (best epoch {} of {}); mape {:.4} vs {:.4}",
            full_report.msle,
            nt_report.msle,
            nt_out.best_epoch,
            nt_out.history.len(),
            full_report.mape,
            nt_report.mape
        ),
        elapsed: start.elapsed(),
    };
    v7.print();
    verdicts.push(v7);

    // 8: causality and leak guards on the trained model
    let start = Instant::now();
    let mut longest: Vec<&CascadeSample> = data.samples.test.iter().collect();
    longest.sort_by_key(|s| std::cmp::Reverse(s.len()));
    let checked: Vec<&CascadeSample> = longest.into_iter().take(3).collect();
    let causal = checked.iter().all(|s| context_is_causal(&full, s));
    let sealed: Vec<CascadeSample> = data.samples.test.iter().map(|s| s.sealed()).collect();
    let predicted = sealed.iter().all(|s| full.predict(s).is_ok());
    let reads: usize = sealed.iter().map(|s| s.leak_attempts()).sum();
    let eval_ok = evaluate(&full, &data.samples.test).is_ok();
    let ok = causal && predicted && reads == 0 && eval_ok;
    let events: Vec<usize> = checked.iter().map(|s| s.len()).collect();
    let v8 = Verdict::strict(
        8,
        "causality and leak guards",
        ok,
        format!("perturbed every event of test cascades with {events:?} events, causal {causal}; sealed label reads {reads} over {} test cascades", sealed.len()),
        start.elapsed(),
    );
    v8.print();
    verdicts.push(v8);

    // 9: determinism
    let start = Instant::now();
    let (_, again_out, again_report) = fit(Variant::Full, &data);
    let same_ckpt = again_out.checkpoint.to_bytes() == full_out.checkpoint.to_bytes();
    let same_metrics = again_report == full_report && again_out.history == full_out.history;
    let v9 = Verdict::strict(
        9,
        "determinism",
        same_ckpt && same_metrics,
        format!(
            "checkpoint bytes equal {same_ckpt}, metrics and history equal {same_metrics}, hash {}",
            &full_out.checkpoint.hash_hex()[..16]
        ),
        start.elapsed(),
    );
    v9.print();
    verdicts.push(v9);

    let passed = verdicts.iter().filter(|v| v.passed).count();
    let blocking: Vec<usize> = verdicts.iter().filter(|v| !v.required_ok).map(|v| v.number).collect();
    let reported: Vec<usize> = verdicts.iter().filter(|v| !v.passed && v.required_ok).map(|v| v.number).collect();
    println!(
        "acceptance: {passed}/{} criteria passed; reported shortfalls {reported:?}; blocking failures {blocking:?} [{:.1} s]",
        verdicts.len(),
        total.elapsed().as_secs_f64()
    );
    if blocking.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
