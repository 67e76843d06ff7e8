//! The gradient-check suite: every tape primitive, the sequence encoder
//! and the full training loss against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{backward_mask, forward_mask, Tape, Var};
use crate::cascade::{Cascade, Repost};
use crate::embed::{EmbeddingTable, GraphWaveConfig};
use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::model::{Model, ModelConfig};
use crate::nn::ModelParams;
use crate::ode::SolveConfig;
use crate::sample::{build_sample, CascadeSample, SampleConfig};
use crate::sequence::{bidirectional_context, SequenceEncoder};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

fn outcome<F>(name: &str, f: F, inputs: &[Tensor], tolerance: f64) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let r = grad_check_many(f, inputs, FD_STEP)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        tolerance,
        coordinates: r.coordinates,
        passed: r.max_rel_error < tolerance,
    })
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output coordinate reaches the gradient with a distinct factor.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = tape.constant(Tensor::randn(&shape, &mut rng));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;
type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;

fn positive(t: &Tensor) -> Tensor {
    t.map(|x| x.abs() + 0.5)
}

/// One check per differentiable primitive.
pub fn primitive_checks() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m34 = Tensor::randn(&[3, 4], &mut rng);
    let m34b = Tensor::randn(&[3, 4], &mut rng);
    let m42 = Tensor::randn(&[4, 2], &mut rng);
    let v4 = Tensor::randn(&[4], &mut rng);
    let v4b = Tensor::randn(&[4], &mut rng);
    let sq = Tensor::randn(&[4, 4], &mut rng);
    let one = Tensor::vector(vec![0.7]);
    let mills_in = Tensor::vector(vec![-3.0, -0.4, 0.0, 1.3, 4.5, 7.5]);

    let unary: Vec<(&str, Unary, Tensor)> = vec![
        ("neg", |t, x| Ok(t.neg(x)), m34.clone()),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), m34.clone()),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3)), m34.clone()),
        ("sigmoid", |t, x| Ok(t.sigmoid(x)), m34.clone()),
        ("tanh", |t, x| Ok(t.tanh(x)), m34.clone()),
        ("softplus", |t, x| Ok(t.softplus(x)), m34.clone()),
        ("relu", |t, x| Ok(t.relu(x)), m34.clone()),
        ("exp", |t, x| Ok(t.exp(x)), m34.clone()),
        ("erf", |t, x| Ok(t.erf(x)), m34.clone()),
        ("square", |t, x| Ok(t.square(x)), m34.clone()),
        ("log1p", |t, x| t.log1p(x), positive(&m34)),
        ("ln", |t, x| t.ln(x), positive(&m34)),
        ("log2_1p", |t, x| t.log2_1p(x), positive(&m34)),
        ("mills", |t, x| Ok(t.mills(x)), mills_in),
        ("sum", |t, x| Ok(t.sum(x)), m34.clone()),
        ("mean", |t, x| Ok(t.mean(x)), m34.clone()),
        ("reshape", |t, x| t.reshape(x, vec![4, 3]), m34.clone()),
        ("transpose", |t, x| t.transpose(x), m34.clone()),
        ("slice", |t, x| t.slice(x, 1, 2), v4.clone()),
        ("row", |t, x| t.row(x, 1), m34.clone()),
        ("softmax", |t, x| t.softmax(x), m34.clone()),
        (
            "masked_softmax.forward",
            |t, x| t.masked_softmax(x, Some(&forward_mask(4))),
            sq.clone(),
        ),
        (
            "masked_softmax.backward",
            |t, x| t.masked_softmax(x, Some(&backward_mask(4))),
            sq.clone(),
        ),
    ];
    let binary: Vec<(&str, Binary, Tensor, Tensor)> = vec![
        ("matmul", |t, a, b| t.matmul(a, b), m34.clone(), m42),
        ("matvec", |t, a, b| t.matmul(a, b), v4.clone(), sq.clone()),
        ("add", |t, a, b| t.add(a, b), m34.clone(), m34b.clone()),
        ("sub", |t, a, b| t.sub(a, b), m34.clone(), m34b.clone()),
        ("mul", |t, a, b| t.mul(a, b), m34.clone(), m34b.clone()),
        ("div", |t, a, b| t.div(a, b), m34.clone(), positive(&m34b)),
        ("add_bias", |t, a, b| t.add_bias(a, b), m34.clone(), v4.clone()),
        ("scale_by", |t, a, b| t.scale_by(a, b), one, m34.clone()),
        (
            "lin_comb",
            |t, a, b| t.lin_comb(a, &[(0.4, b), (-2.0, b)]),
            m34.clone(),
            m34b.clone(),
        ),
        ("dot", |t, a, b| t.dot(a, b), v4.clone(), v4b.clone()),
        ("concat", |t, a, b| t.concat(&[a, b]), m34.clone(), m34b.clone()),
        ("stack_rows", |t, a, b| t.stack_rows(&[a, b, a]), v4.clone(), v4b.clone()),
    ];

    let mut out = Vec::new();
    for (name, op, x) in unary {
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = op(t, v[0])?;
            weighted_sum(t, y)
        };
        out.push(outcome(name, f, &[x], PRIMITIVE_TOL)?);
    }
    for (name, op, a, b) in binary {
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y)
        };
        out.push(outcome(name, f, &[a, b], PRIMITIVE_TOL)?);
    }
    let gain = Tensor::randn(&[4], &mut rng);
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    };
    out.push(outcome("layer_norm", f, &[m34, gain, v4], PRIMITIVE_TOL)?);
    Ok(out)
}

/// Jump ODE passes in both directions plus fusion, on three events, with
/// the encoder parameters and both embedding views as inputs.
pub fn sequence_check() -> Result<CheckOutcome> {
    let (h, d) = (4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ModelParams::new();
    let enc = SequenceEncoder::new(&mut params, 2 * d, h, 0.05, 100_000, &mut rng)?;
    let np = params.len();
    let mut inputs = params.tensors().to_vec();
    inputs.push(Tensor::randn(&[3, d], &mut rng));
    inputs.push(Tensor::randn(&[3, d], &mut rng));
    let times = [0.0, 0.12, 0.27];
    let f = |t: &mut Tape, v: &[Var]| {
        let ctx = bidirectional_context(t, v[np], v[np + 1])?;
        let (hf, hb) = enc.jump_ode_pass(t, v, ctx, &times)?;
        let fused = enc.fuse(t, v, &hf, &hb)?;
        weighted_sum(t, fused)
    };
    outcome("jump_ode_pass+fuse", f, &inputs, COMPOSITE_TOL)
}

/// Small model settings used by the full-loss check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        latent: 2,
        embed_dim: 4,
        grid_points: 2,
        trend_solver: SolveConfig::dopri5(1e-10, 1e-12),
        ..ModelConfig::default()
    }
}

/// A seven-participant cascade, three of them observed before `t_o = 3`,
/// featurized for [`toy_model_config`].
pub fn toy_sample() -> Result<CascadeSample> {
    let ev = |parent, user, time| Repost { parent, user, time };
    let c = Cascade::new(
        1,
        0,
        0.0,
        vec![
            ev(0, 1, 0.5),
            ev(1, 2, 1.2),
            ev(0, 3, 2.0),
            ev(3, 4, 4.0),
            ev(2, 5, 6.5),
            ev(0, 6, 9.0),
        ],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let global = EmbeddingTable::new(8, 4, Tensor::randn(&[8 * 4], &mut rng).into_data())?;
    let cfg = SampleConfig {
        t_o: 3.0,
        t_p: 10.0,
        grid_points: 2,
        max_events: 100,
        graphwave: GraphWaveConfig {
            dim: 4,
            ..GraphWaveConfig::default()
        },
    };
    build_sample(&c, &global, &cfg)
}

/// The total training loss of the toy sample over every model parameter,
/// with a fixed non-zero latent draw.
pub fn full_loss_check() -> Result<CheckOutcome> {
    let model = Model::new(toy_model_config())?;
    let sample = toy_sample()?;
    let noise = [0.8, -0.3];
    let f = |t: &mut Tape, v: &[Var]| Ok(model.loss(t, v, &sample, &noise)?.total);
    outcome("full_loss", f, model.params.tensors(), COMPOSITE_TOL)
}

/// Every check, primitives first.
pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = primitive_checks()?;
    out.push(sequence_check()?);
    out.push(full_loss_check()?);
    Ok(out)
}
