//! Named parameter storage and the small layers the model is built from.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every trainable tensor of a model, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot.
    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let slot = self.tensors.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(t);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(|i| &mut self.tensors[i])
    }

    /// Scalar count across all tensors.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor. `entries` must name each registered
    /// parameter once, with its registered shape.
    pub fn assign(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let slot = self
                .slot(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if t.shape() != self.tensors[slot].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[slot].shape()
                )));
            }
            self.tensors[slot] = t;
            seen[slot] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter {}", self.names[i])));
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// `y = x W + b` with `W: [in, out]`; `x` may be a vector or a matrix of rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn new(p: &mut ModelParams, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = p.register(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
        let b = p.register(format!("{name}.b"), Tensor::uniform(&[fan_out], bound, rng))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, v[self.w])?;
        tape.add_bias(y, v[self.b])
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(p: &mut ModelParams, name: &str, dims: &[usize], act: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least one layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(p, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, act })
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, v, h)?;
            if i + 1 < self.layers.len() {
                h = self.act.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Gated recurrent unit with reset, update and candidate gates:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// u = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
/// c = tanh(x W_ic + b_ic + r * (h W_hc + b_hc))
/// h' = (1 - u) * c + u * h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub input: [Linear; 3],
    pub hidden: [Linear; 3],
}

impl Gru {
    pub fn new(p: &mut ModelParams, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut lin = |tag: &str, fan_in: usize| -> Result<Linear> {
            let w = p.register(format!("{name}.w_{tag}"), Tensor::uniform(&[fan_in, hidden], bound, rng))?;
            let b = p.register(format!("{name}.b_{tag}"), Tensor::uniform(&[hidden], bound, rng))?;
            Ok(Linear {
                w,
                b,
                fan_in,
                fan_out: hidden,
            })
        };
        Ok(Self {
            input: [lin("ir", input)?, lin("iu", input)?, lin("ic", input)?],
            hidden: [lin("hr", hidden)?, lin("hu", hidden)?, lin("hc", hidden)?],
        })
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], h: Var, x: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, k: usize| -> Result<Var> {
            let a = self.input[k].forward(tape, v, x)?;
            let b = self.hidden[k].forward(tape, v, h)?;
            let s = tape.add(a, b)?;
            Ok(tape.sigmoid(s))
        };
        let r = gate(tape, 0)?;
        let u = gate(tape, 1)?;
        let xc = self.input[2].forward(tape, v, x)?;
        let hc = self.hidden[2].forward(tape, v, h)?;
        let rhc = tape.mul(r, hc)?;
        let pre = tape.add(xc, rhc)?;
        let c = tape.tanh(pre);
        // h' = c + u * (h - c)
        let diff = tape.sub(h, c)?;
        let ud = tape.mul(u, diff)?;
        tape.add(c, ud)
    }
}
