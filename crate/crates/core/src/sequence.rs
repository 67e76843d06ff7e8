//! Bidirectional jump-ODE encoder for cascade sequences.
//!
//! Both directions start from a self-gated copy of one trainable state,
//! drift through a learned vector field between events (explicit Euler),
//! and jump through a GRU cell at every event, reading the masked
//! attention context of that position. A per-event channel attention mixes
//! the two directions and a layer norm finishes the output.

use rand::Rng;

use crate::autodiff::{backward_mask, forward_mask, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Gru, Linear, Mlp, ModelParams};
use crate::ode::solve_euler;
use crate::tensor::Tensor;

/// Normalized times are multiplied by this before the temporal encoding.
pub const TIME_SCALE: f64 = 100.0;

/// Sinusoidal time encoding. With 1-based component index `j`, odd `j`
/// holds `cos(s / 10000^((j-1)/d))` and even `j` holds
/// `sin(s / 10000^(j/d))`, where `s = TIME_SCALE * t`.
pub fn temporal_encoding(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("temporal encoding dimension {d} must be even and positive")));
    }
    let s = TIME_SCALE * t;
    Ok((1..=d)
        .map(|j| {
            if j % 2 == 1 {
                (s / 10000f64.powf((j - 1) as f64 / d as f64)).cos()
            } else {
                (s / 10000f64.powf(j as f64 / d as f64)).sin()
            }
        })
        .collect())
}

/// `softmax(Q K^T / sqrt(d) + M) V` with `Q = K = V = s`.
pub fn self_attention(tape: &mut Tape, s: Var, mask: &Tensor) -> Result<Var> {
    let d = tape.value(s).cols();
    let st = tape.transpose(s)?;
    let raw = tape.matmul(s, st)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let w = tape.masked_softmax(scores, Some(mask))?;
    tape.matmul(w, s)
}

/// Forward and backward attention contexts, each `n x (d_c + d_g)`, with
/// the cascade view first.
#[derive(Debug, Clone, Copy)]
pub struct BiContext {
    pub forward: Var,
    pub backward: Var,
}

/// `sc` already carries the temporal encoding.
pub fn bidirectional_context(tape: &mut Tape, sg: Var, sc: Var) -> Result<BiContext> {
    let n = tape.value(sg).rows();
    if tape.shape(sg).len() != 2 || n == 0 || tape.shape(sg)[0] == 0 {
        return Err(Error::EmptySequence);
    }
    if tape.value(sc).rows() != n || tape.shape(sc).len() != 2 {
        return Err(Error::shape(
            "bidirectional_context",
            format!("{:?} vs {:?}", tape.shape(sc), tape.shape(sg)),
        ));
    }
    let (mf, mb) = (forward_mask(n), backward_mask(n));
    let cf = self_attention(tape, sc, &mf)?;
    let gf = self_attention(tape, sg, &mf)?;
    let cb = self_attention(tape, sc, &mb)?;
    let gb = self_attention(tape, sg, &mb)?;
    Ok(BiContext {
        forward: tape.concat(&[cf, gf])?,
        backward: tape.concat(&[cb, gb])?,
    })
}

/// Parameters of the sequence encoder, as slots into a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub hidden: usize,
    pub init: usize,
    pub gate_f: Linear,
    pub gate_b: Linear,
    pub drift_f: Mlp,
    pub drift_b: Mlp,
    pub gru_f: Gru,
    pub gru_b: Gru,
    /// `W^a`, `hidden x hidden`.
    pub fuse_w: usize,
    /// `a`, length `hidden`.
    pub fuse_a: usize,
    pub norm_gain: usize,
    pub norm_bias: usize,
    pub euler_step: f64,
    pub max_steps: usize,
}

impl SequenceEncoder {
    pub fn new(
        p: &mut ModelParams,
        context_dim: usize,
        hidden: usize,
        euler_step: f64,
        max_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let drift = [hidden; 4];
        Ok(Self {
            hidden,
            init: p.register("seq.init", Tensor::uniform(&[hidden], 1.0, rng))?,
            gate_f: Linear::new(p, "seq.gate_f", hidden, hidden, rng)?,
            gate_b: Linear::new(p, "seq.gate_b", hidden, hidden, rng)?,
            drift_f: Mlp::new(p, "seq.drift_f", &drift, Activation::Softplus, rng)?,
            drift_b: Mlp::new(p, "seq.drift_b", &drift, Activation::Softplus, rng)?,
            gru_f: Gru::new(p, "seq.gru_f", context_dim, hidden, rng)?,
            gru_b: Gru::new(p, "seq.gru_b", context_dim, hidden, rng)?,
            fuse_w: p.register("seq.fuse_w", Tensor::uniform(&[hidden, hidden], bound, rng))?,
            fuse_a: p.register("seq.fuse_a", Tensor::uniform(&[hidden], bound, rng))?,
            norm_gain: p.register("seq.norm_gain", Tensor::ones(&[hidden]))?,
            norm_bias: p.register("seq.norm_bias", Tensor::zeros(&[hidden]))?,
            euler_step,
            max_steps,
        })
    }

    /// `(H * sigmoid(W^f H + b^f), H * sigmoid(W^b H + b^b))`.
    pub fn self_gate_init(&self, tape: &mut Tape, v: &[Var]) -> Result<(Var, Var)> {
        let h = v[self.init];
        let gated = |gate: &Linear, tape: &mut Tape| -> Result<Var> {
            let pre = gate.forward(tape, v, h)?;
            let g = tape.sigmoid(pre);
            tape.mul(h, g)
        };
        let f = gated(&self.gate_f, tape)?;
        let b = gated(&self.gate_b, tape)?;
        Ok((f, b))
    }

    fn drift(&self, tape: &mut Tape, v: &[Var], net: &Mlp, y: Var, len: f64) -> Result<Var> {
        let f = |tape: &mut Tape, y: Var| net.forward(tape, v, y);
        solve_euler(tape, &f, y, 0.0, len, self.euler_step, self.max_steps)
    }

    /// Post-jump states of both sweeps, indexed by event position. The
    /// backward sweep runs from the last event toward the first.
    pub fn jump_ode_pass(&self, tape: &mut Tape, v: &[Var], ctx: BiContext, times: &[f64]) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = times.len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if times.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Config("event times must be non-decreasing".into()));
        }
        let (mut hf, mut hb) = self.self_gate_init(tape, v)?;

        let mut fwd = Vec::with_capacity(n);
        for i in 0..n {
            let s = tape.row(ctx.forward, i)?;
            hf = self.gru_f.forward(tape, v, hf, s)?;
            fwd.push(hf);
            if i + 1 < n {
                hf = self.drift(tape, v, &self.drift_f, hf, times[i + 1] - times[i])?;
            }
        }

        let mut bwd = vec![hb; n];
        for i in (0..n).rev() {
            let s = tape.row(ctx.backward, i)?;
            hb = self.gru_b.forward(tape, v, hb, s)?;
            bwd[i] = hb;
            if i > 0 {
                hb = self.drift(tape, v, &self.drift_b, hb, times[i] - times[i - 1])?;
            }
        }
        Ok((fwd, bwd))
    }

    /// Per-event mixing weights `softmax(a . W^a H)` over the two
    /// directions, as an `n x 2` matrix.
    pub fn fusion_weights(&self, tape: &mut Tape, v: &[Var], hf: &[Var], hb: &[Var]) -> Result<Var> {
        if hf.len() != hb.len() || hf.is_empty() {
            return Err(Error::shape(
                "fuse",
                format!("{} forward vs {} backward states", hf.len(), hb.len()),
            ));
        }
        let n = hf.len();
        let wa = tape.matmul(v[self.fuse_w], v[self.fuse_a])?;
        let mut logits = Vec::with_capacity(2);
        for states in [hf, hb] {
            let m = tape.stack_rows(states)?;
            let l = tape.matmul(m, wa)?;
            logits.push(tape.reshape(l, vec![n, 1])?);
        }
        let l = tape.concat(&logits)?;
        tape.softmax(l)
    }

    /// Mixed states before the layer norm, `n x hidden`.
    pub fn fuse_raw(&self, tape: &mut Tape, v: &[Var], hf: &[Var], hb: &[Var]) -> Result<Var> {
        let gamma = self.fusion_weights(tape, v, hf, hb)?;
        let mut rows = Vec::with_capacity(hf.len());
        for i in 0..hf.len() {
            let g = tape.row(gamma, i)?;
            let g0 = tape.slice(g, 0, 1)?;
            let g1 = tape.slice(g, 1, 1)?;
            let a = tape.scale_by(g0, hf[i])?;
            let b = tape.scale_by(g1, hb[i])?;
            rows.push(tape.add(a, b)?);
        }
        tape.stack_rows(&rows)
    }

    pub fn fuse(&self, tape: &mut Tape, v: &[Var], hf: &[Var], hb: &[Var]) -> Result<Var> {
        let raw = self.fuse_raw(tape, v, hf, hb)?;
        tape.layer_norm(raw, v[self.norm_gain], v[self.norm_bias])
    }

    /// Full encoder: global rows `sg`, GraphWave rows `xc` (both `n x d`)
    /// and normalized times to the fused `n x hidden` states.
    pub fn encode(&self, tape: &mut Tape, v: &[Var], sg: &Tensor, xc: &Tensor, times: &[f64]) -> Result<Var> {
        let sc = with_time_encoding(xc, times)?;
        let sg = tape.constant(sg.clone());
        let sc = tape.constant(sc);
        let ctx = bidirectional_context(tape, sg, sc)?;
        let (hf, hb) = self.jump_ode_pass(tape, v, ctx, times)?;
        self.fuse(tape, v, &hf, &hb)
    }
}

/// `X^c_i + E(t_i)` row by row.
pub fn with_time_encoding(xc: &Tensor, times: &[f64]) -> Result<Tensor> {
    if xc.shape().len() != 2 || xc.rows() != times.len() {
        return Err(Error::shape(
            "with_time_encoding",
            format!("{:?} for {} times", xc.shape(), times.len()),
        ));
    }
    let d = xc.cols();
    let mut data = xc.data().to_vec();
    for (row, &t) in data.chunks_mut(d).zip(times) {
        for (x, e) in row.iter_mut().zip(temporal_encoding(t, d)?) {
            *x += e;
        }
    }
    Tensor::matrix(times.len(), d, data)
}
