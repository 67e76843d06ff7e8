//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Leaves are either parameters ([`Tape::param`], which participate
//! in differentiation) or constants ([`Tape::constant`], which never receive
//! a gradient). [`Tape::backward`] replays the tape once from a scalar loss.
//!
//! ```
//! use vnoip::autodiff::Tape;
//! use vnoip::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Additive mask value for blocked attention positions.
pub const MASK_BLOCKED: f64 = -1e9;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Above this argument the inverse Mills ratio is evaluated by its
/// continued fraction instead of the density over the survival function.
pub const MILLS_ASYMPTOTIC_FROM: f64 = 6.0;

/// Depth of the continued fraction; ample for `a > 6` in double precision.
const MILLS_FRACTION_TERMS: usize = 64;

/// Floor applied to the normal survival function `1 - Phi(a)`.
pub const SURVIVAL_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn tape_id(self) -> u32 {
        self.tape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    Exp,
    Erf,
    Log1p,
    Ln,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    LinComb { base: Var, terms: Vec<(f64, Var)> },
    AddConst(Var),
    Unary(Var, Unary),
    Mills(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Row { x: Var, row: usize },
    StackRows(Vec<Var>),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations.
///
/// Single-threaded. A tape supports exactly one [`Tape::backward`] call.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by [`Var`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` did not
    /// participate in the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "Var belongs to a different tape");
        self.grads.get(v.idx as usize).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "Var belongs to a different tape");
        self.grads.get_mut(v.idx as usize).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse Mills ratio `phi(a) / (1 - Phi(a))` of the standard normal,
/// i.e. the mean excess of a standard normal truncated below at `a`.
pub fn mills_ratio(a: f64) -> f64 {
    if a > MILLS_ASYMPTOTIC_FROM {
        // a + 1/(a + 2/(a + 3/(a + ...)))
        let mut tail = a;
        for k in (2..=MILLS_FRACTION_TERMS).rev() {
            tail = a + k as f64 / tail;
        }
        return a + 1.0 / tail;
    }
    let pdf = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let survival = (0.5 * libm::erfc(a / SQRT_2)).max(SURVIVAL_FLOOR);
    pdf / survival
}

fn mills_ratio_grad(a: f64, r: f64) -> f64 {
    r * (r - a)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Erf => libm::erf(x),
            Unary::Log1p => x.ln_1p(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Erf => FRAC_2_SQRT_PI * (-x * x).exp(),
            Unary::Log1p => 1.0 / (1.0 + x),
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Erf => "erf",
            Unary::Log1p => "log1p",
            Unary::Ln => "ln",
            Unary::Square => "square",
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, tracked });
        Var { tape: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.idx as usize]
    }

    fn tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand a column vector; the result drops the implied unit axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::shape("matmul", format!("lhs rank {}", sa.len()))),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(Error::shape("matmul", format!("rhs rank {}", sb.len()))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, tracked))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Div(a, b), tracked))
    }

    /// Adds a length-`d` bias to every row of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.shape() != [d] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), tracked))
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| c * v);
        let tracked = self.tracked(s) || self.tracked(x);
        Ok(self.push(out, Op::ScaleBy(s, x), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, c), tracked)
    }

    /// `base + sum(c_i * v_i)` as a single node; all operands share a shape.
    pub fn lin_comb(&mut self, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
        let mut data = self.value(base).data().to_vec();
        for &(c, v) in terms {
            let t = self.value(v);
            same_shape("lin_comb", self.value(base), t)?;
            if c != 0.0 {
                add_into(&mut data, t.data(), c);
            }
        }
        let out = Tensor::new(self.shape(base).to_vec(), data)?;
        let tracked = self.tracked(base) || terms.iter().any(|&(c, v)| c != 0.0 && self.tracked(v));
        let terms = terms.iter().copied().filter(|&(c, _)| c != 0.0).collect();
        Ok(self.push(out, Op::LinComb { base, terms }, tracked))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let tracked = self.tracked(x);
        self.push(out, Op::AddConst(x), tracked)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Elementwise activation. Only `log1p` and `ln` have restricted domains
    /// and are exposed through fallible wrappers.
    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let tracked = self.tracked(x);
        self.push(out, Op::Unary(x, kind), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn erf(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Erf)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn log1p(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| !(v > -1.0)) {
            return Err(Error::Domain {
                op: Unary::Log1p.name(),
                detail: format!("argument {v} is not above -1"),
            });
        }
        Ok(self.unary(x, Unary::Log1p))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: Unary::Ln.name(),
                detail: format!("argument {v} is not positive"),
            });
        }
        Ok(self.unary(x, Unary::Ln))
    }

    /// `log2(x + 1)`, the popularity scale used by every loss and encoder.
    pub fn log2_1p(&mut self, x: Var) -> Result<Var> {
        let l = self.log1p(x)?;
        Ok(self.scale(l, std::f64::consts::LOG2_E))
    }

    /// Elementwise inverse Mills ratio of the standard normal.
    pub fn mills(&mut self, x: Var) -> Var {
        let out = self.value(x).map(mills_ratio);
        let tracked = self.tracked(x);
        self.push(out, Op::Mills(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("transpose", format!("rank {}", s.len()))),
        };
        let src = t.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let out = Tensor::matrix(cols, rows, data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Transpose { x, rows, cols }, tracked))
    }

    /// Concatenates along the last axis. Inputs must agree on every other
    /// axis; 1-D inputs produce a 1-D result.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence)?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), tracked))
    }

    /// Contiguous sub-vector `x[start..start+len]` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || start + len > t.len() || len == 0 {
            return Err(Error::shape("slice", format!("{:?}[{start}..{}]", t.shape(), start + len)));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Slice { x, start }, tracked))
    }

    /// Row `i` of a 2-D tensor, as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || i >= t.shape()[0] {
            return Err(Error::shape("row", format!("row {i} of {:?}", t.shape())));
        }
        let out = Tensor::vector(t.row(i).to_vec());
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Row { x, row: i }, tracked))
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::EmptySequence)?;
        let d = self.value(first).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [d] {
                return Err(Error::shape("stack_rows", format!("{:?} vs [{d}]", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows.len(), d, data)?;
        let tracked = rows.iter().any(|&r| self.tracked(r));
        Ok(self.push(out, Op::StackRows(rows.to_vec()), tracked))
    }

    /// Row-wise softmax of `scores + mask`. Mask entries are `0` (allowed) or
    /// [`MASK_BLOCKED`]; a row with no allowed entry is rejected.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(scores);
        if let Some(m) = mask {
            same_shape("masked_softmax", t, m)?;
        }
        let cols = t.cols();
        let mut data = t.data().to_vec();
        if let Some(m) = mask {
            for (r, mrow) in m.data().chunks(cols).enumerate() {
                if mrow.iter().all(|&v| v <= MASK_BLOCKED * 0.5) {
                    return Err(Error::DegenerateMask { row: r });
                }
            }
            for (v, mv) in data.iter_mut().zip(m.data()) {
                *v += mv;
            }
        }
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(scores);
        Ok(self.push(out, Op::Softmax(scores), tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Normalizes each row of `x[..., d]` to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", format!("param {:?} vs d={d}", self.shape(p))));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let (_, _, xhat) = normalize_row(row);
            for j in 0..d {
                data.push(g[j] * xhat[j] + b[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, tracked))
    }

    /// Replays the tape from the scalar `loss`. May be called once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 || lt.shape().len() > 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let n = loss.idx as usize + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.idx as usize].tracked {
            grads[loss.idx as usize] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.tracked => Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.idx as usize].value;
        let wants = |v: Var| self.nodes[v.idx as usize].tracked;
        let len = |v: Var| self.nodes[v.idx as usize].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    // dA = G B^T
                    let bt = val(b).data();
                    accumulate(&mut grads[a.idx as usize], m * k, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for c in 0..n {
                                    s += g[r * n + c] * bt[p * n + c];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                }
                if wants(b) {
                    // dB = A^T G
                    let at = val(a).data();
                    accumulate(&mut grads[b.idx as usize], k * n, |gb| {
                        for r in 0..m {
                            for p in 0..k {
                                let av = at[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let grow = &g[r * n..(r + 1) * n];
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(&mut grads[v.idx as usize], g.len(), |gv| add_into(gv, g, 1.0));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.idx as usize], g.len(), |gv| add_into(gv, g, 1.0));
                }
                if wants(b) {
                    accumulate(&mut grads[b.idx as usize], g.len(), |gv| add_into(gv, g, -1.0));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b).data();
                    accumulate(&mut grads[a.idx as usize], g.len(), |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                }
                if wants(b) {
                    let av = val(a).data();
                    accumulate(&mut grads[b.idx as usize], g.len(), |gb| {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
            }
            &Op::Div(a, b) => {
                let bv = val(b).data();
                if wants(a) {
                    accumulate(&mut grads[a.idx as usize], g.len(), |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] / bv[j];
                        }
                    });
                }
                if wants(b) {
                    let av = val(a).data();
                    accumulate(&mut grads[b.idx as usize], g.len(), |gb| {
                        for j in 0..g.len() {
                            gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                        }
                    });
                }
            }
            &Op::AddRowBias(x, bias) => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| add_into(gx, g, 1.0));
                }
                if wants(bias) {
                    let d = len(bias);
                    accumulate(&mut grads[bias.idx as usize], d, |gb| {
                        for row in g.chunks(d) {
                            add_into(gb, row, 1.0);
                        }
                    });
                }
            }
            &Op::ScaleBy(s, x) => {
                let c = val(s).item();
                if wants(s) {
                    let xv = val(x).data();
                    let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[s.idx as usize], 1, |gs| gs[0] += dot);
                }
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| add_into(gx, g, c));
                }
            }
            &Op::Scale(x, c) => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| add_into(gx, g, c));
                }
            }
            Op::LinComb { base, terms } => {
                if wants(*base) {
                    accumulate(&mut grads[base.idx as usize], g.len(), |gb| add_into(gb, g, 1.0));
                }
                for &(c, v) in terms {
                    if wants(v) {
                        accumulate(&mut grads[v.idx as usize], g.len(), |gv| add_into(gv, g, c));
                    }
                }
            }
            &Op::AddConst(x) | &Op::Reshape(x) => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| add_into(gx, g, 1.0));
                }
            }
            &Op::Unary(x, kind) => {
                if wants(x) {
                    let xv = val(x).data();
                    let yv = node.value.data();
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| {
                        for j in 0..g.len() {
                            gx[j] += g[j] * kind.derivative(xv[j], yv[j]);
                        }
                    });
                }
            }
            &Op::Mills(x) => {
                if wants(x) {
                    let xv = val(x).data();
                    let yv = node.value.data();
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| {
                        for j in 0..g.len() {
                            gx[j] += g[j] * mills_ratio_grad(xv[j], yv[j]);
                        }
                    });
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], len(x), |gx| gx.iter_mut().for_each(|v| *v += g[0]));
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = len(x);
                    let s = g[0] / n as f64;
                    accumulate(&mut grads[x.idx as usize], n, |gx| gx.iter_mut().for_each(|v| *v += s));
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], rows * cols, |gx| {
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[i * cols + j] += g[j * rows + i];
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        accumulate(&mut grads[p.idx as usize], rows * w, |gp| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                add_into(&mut gp[r * w..(r + 1) * w], src, 1.0);
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::Slice { x, start } => {
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], len(x), |gx| {
                        add_into(&mut gx[start..start + g.len()], g, 1.0)
                    });
                }
            }
            &Op::Row { x, row } => {
                if wants(x) {
                    let d = g.len();
                    accumulate(&mut grads[x.idx as usize], len(x), |gx| {
                        add_into(&mut gx[row * d..(row + 1) * d], g, 1.0)
                    });
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.cols();
                for (r, &v) in rows.iter().enumerate() {
                    if wants(v) {
                        accumulate(&mut grads[v.idx as usize], d, |gv| add_into(gv, &g[r * d..(r + 1) * d], 1.0));
                    }
                }
            }
            &Op::Softmax(x) => {
                if wants(x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    accumulate(&mut grads[x.idx as usize], g.len(), |gx| {
                        for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            &Op::LayerNorm { x, gain, bias } => {
                let xt = val(x);
                let d = xt.cols();
                let gv = val(gain).data();
                let mut g_gain = vec![0.0; d];
                let mut g_bias = vec![0.0; d];
                let mut g_x = vec![0.0; xt.len()];
                for (r, row) in xt.data().chunks(d).enumerate() {
                    let (_, inv, xhat) = normalize_row(row);
                    let grow = &g[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for j in 0..d {
                        g_bias[j] += grow[j];
                        g_gain[j] += grow[j] * xhat[j];
                        let gh = grow[j] * gv[j];
                        sum_gh += gh;
                        sum_gh_xh += gh * xhat[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let gh = grow[j] * gv[j];
                        g_x[r * d + j] = inv / df * (df * gh - sum_gh - xhat[j] * sum_gh_xh);
                    }
                }
                if wants(x) {
                    accumulate(&mut grads[x.idx as usize], g_x.len(), |t| add_into(t, &g_x, 1.0));
                }
                if wants(gain) {
                    accumulate(&mut grads[gain.idx as usize], d, |t| add_into(t, &g_gain, 1.0));
                }
                if wants(bias) {
                    accumulate(&mut grads[bias.idx as usize], d, |t| add_into(t, &g_bias, 1.0));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Returns (mean, 1/sqrt(var + eps), normalized row).
fn normalize_row(row: &[f64]) -> (f64, f64, Vec<f64>) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (mean, inv, row.iter().map(|v| (v - mean) * inv).collect())
}

/// Forward-only mask builders for causal attention.
pub fn forward_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = MASK_BLOCKED;
        }
    }
    m
}

pub fn backward_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            m.data_mut()[i * n + j] = MASK_BLOCKED;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let b = t.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let p = t.matmul(i, b).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(mat(1, 2, &[1.0, 2.0]));
        let c = t.constant(mat(2, 1, &[3.0, 4.0]));
        let p = t.matmul(a, c).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
        assert_eq!(t.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut t = Tape::new();
        let a = t.param(mat(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]));
        let bt = mat(3, 2, &[2.0, -1.0, 0.0, 4.0, 1.0, 1.0]);
        let b = t.param(bt.clone());
        let p = t.matmul(a, b).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        // ones[2x2] * B^T: each row of dA is the row sums of B.
        let expect = [1.0, 4.0, 2.0, 1.0, 4.0, 2.0];
        assert_eq!(g.get(a).unwrap().data(), &expect);
    }

    #[test]
    fn softmax_single_allowed_position() {
        let mut t = Tape::new();
        let s = t.constant(mat(2, 2, &[0.3, 7.0, -1.0, 2.0]));
        let p = t.masked_softmax(s, Some(&forward_mask(2))).unwrap();
        assert_eq!(t.value(p).row(0), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[4, 4]));
        let p = t.masked_softmax(s, Some(&Tensor::zeros(&[4, 4]))).unwrap();
        assert!(t.value(p).data().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn softmax_additive_mask_blocks() {
        let mut t = Tape::new();
        let s = t.constant(mat(1, 2, &[1.0, 2.0]));
        let m = mat(1, 2, &[0.0, MASK_BLOCKED]);
        let p = t.masked_softmax(s, Some(&m)).unwrap();
        let w = t.value(p).data();
        assert!((w[0] - 1.0).abs() < 1e-30);
        assert!(w[1] < 1e-30);
    }

    #[test]
    fn softmax_fully_blocked_row_is_rejected() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::zeros(&[2, 2]));
        let m = mat(2, 2, &[0.0, 0.0, MASK_BLOCKED, MASK_BLOCKED]);
        assert!(matches!(t.masked_softmax(s, Some(&m)), Err(Error::DegenerateMask { row: 1 })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let ones = t.constant(Tensor::ones(&[2]));
        let zeros = t.constant(Tensor::zeros(&[2]));
        let x = t.constant(mat(2, 2, &[3.0, 3.0, 1.0, -1.0]));
        let y = t.layer_norm(x, ones, zeros).unwrap();
        let v = t.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        // eps perturbs unit variance slightly
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);

        let bias = t.constant(Tensor::vector(vec![0.25, -4.0]));
        let y = t.layer_norm(x, zeros, bias).unwrap();
        assert_eq!(t.value(y).row(1), &[0.25, -4.0]);
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let z = t.param(Tensor::vector(vec![0.0]));
        let e = t.erf(z);
        assert_eq!(t.item(e), 0.0);
        let sp = t.softplus(z);
        assert!((t.item(sp) - std::f64::consts::LN_2).abs() < 1e-15);
        let s = t.sigmoid(z);
        assert_eq!(t.item(s), 0.5);
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap().item(), 0.25);
    }

    #[test]
    fn log1p_domain() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(t.log1p(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_basic_and_single_shot() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_participating_gradients_are_absent() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0]));
        let unused = t.param(Tensor::vector(vec![5.0]));
        let c = t.constant(Tensor::vector(vec![2.0]));
        let p = t.mul(x, c).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn mills_ratio_at_zero() {
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mills_ratio(0.0) - expected).abs() < 1e-15);
        assert!(mills_ratio(-40.0) < 1e-300);
        for (a, want) in [
            (6.0000001, 6.1584827021458075),
            (7.5, 7.62896639110371),
            (10.0, 10.098093233962423),
            (30.0, 30.033259667433676),
        ] {
            assert!((mills_ratio(a) - want).abs() < 1e-13 * want, "{a}");
        }
        assert!((mills_ratio(6.0) - mills_ratio(6.0 + 1e-12)).abs() < 1e-10);
    }

    #[test]
    fn relu_propagates_nan() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![f64::NAN, -1.0, 2.0]));
        let y = t.relu(x);
        let v = t.value(y).data();
        assert!(v[0].is_nan());
        assert_eq!(&v[1..], &[0.0, 2.0]);
    }
}
