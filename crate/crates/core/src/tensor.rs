//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves either borrow their
//! storage (model parameters) or own it (inputs, constants); every primitive
//! appends one node holding its output values. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into every node that depends on
//! a differentiable leaf.
//!
//! All primitives operate on row-major storage. Matrix primitives require
//! 2-D shapes; element-wise primitives accept any shape.

use std::borrow::Cow;
use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; rebuild the forward pass first")]
    AlreadyBackpropagated,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Owned dense array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_shape(&shape, values.len())?;
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn i.i.d. from `U[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let values = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[self.shape.len() - 1];
        self.values[row * cols + col] = value;
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != len
    {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Log,
    Concat,
    EmbedLookup,
    Pick,
    Sum,
    Relu,
    Transpose,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Log => "log",
            Primitive::Concat => "concat",
            Primitive::EmbedLookup => "embed_lookup",
            Primitive::Pick => "pick",
            Primitive::Sum => "sum",
            Primitive::Relu => "max_with_zero",
            Primitive::Transpose => "transpose",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `b` is either the same shape as `a` or a `[1, cols]` row broadcast over rows.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    /// Concatenation along axis 0 (rows) or 1 (columns) of 2-D inputs.
    Concat(Vec<Var>, usize),
    EmbedLookup(Var, Vec<usize>),
    /// One element per row: `out[r] = a[r, idx[r]]`.
    Pick(Var, Vec<usize>),
    Sum(Var),
    Relu(Var),
    Transpose(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::Log(..) => Primitive::Log,
            Op::Concat(..) => Primitive::Concat,
            Op::EmbedLookup(..) => Primitive::EmbedLookup,
            Op::Pick(..) => Primitive::Pick,
            Op::Sum(..) => Primitive::Sum,
            Op::Relu(..) => Primitive::Relu,
            Op::Transpose(..) => Primitive::Transpose,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::EmbedLookup(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Relu(a)
            | Op::Transpose(a) => vec![*a],
        }
    }
}

struct Node<'a> {
    op: Op,
    shape: Vec<usize>,
    values: Cow<'a, [f64]>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation record for one forward pass.
///
/// Nodes are stored in creation order, so every input precedes its consumer.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    backpropagated: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf borrowing the tensor's storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(t.shape.clone(), Cow::Borrowed(&t.values), true)
    }

    /// Differentiable leaf owning a copy of its values.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.shape, Cow::Owned(t.values), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.shape, Cow::Owned(t.values), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(t.shape.clone(), Cow::Borrowed(&t.values), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, values: Cow<'a, [f64]>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            values,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.to_vec(),
        }
    }

    /// First element; convenient for `[1]`-shaped results.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    /// Gradient accumulated by the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when the node was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let values = match &n.grad {
            Some(g) => g.clone(),
            None => vec![0.0; n.values.len()],
        };
        Tensor {
            shape: n.shape.clone(),
            values,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.primitive().name(),
            });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            values: Cow::Owned(values),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (shape, values) = self.evaluate(&op)?;
        self.push(op, shape, values)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// Element-wise sum; `b` may also be a `[1, cols]` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a))
    }

    /// Log-softmax along the last axis, computed with the row maximum subtracted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Log(a))
    }

    /// Concatenate 2-D inputs along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec(), axis))
    }

    /// Gather rows of a 2-D table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.record(Op::EmbedLookup(table, ids.to_vec()))
    }

    /// Select `a[r, idx[r]]` for every row, giving a `[rows, 1]` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.record(Op::Pick(a, idx.to_vec()))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// `max(0, a)` element-wise. The sub-gradient at exactly zero is zero.
    pub fn max_with_zero(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    /// Recompute every non-leaf node from its inputs and report whether all
    /// outputs match the recorded values bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (shape, values) = self.evaluate(&node.op)?;
            if shape != node.shape
                || values
                    .iter()
                    .zip(node.values.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Backward pass with `d loss = seed`.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.nodes[loss.0].shape != [1] {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.backpropagated = true;
        self.nodes[loss.0].grad = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.values.len();
        let mut g = node.grad.take().unwrap_or_else(|| vec![0.0; len]);
        f(&mut g, &node.values);
        node.grad = Some(g);
    }

    /// Like [`Tape::accumulate`], but also lends the values of a second node.
    fn accumulate_with(&mut self, v: Var, other: Var, f: impl FnOnce(&mut [f64], &[f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if v == other {
            let copy = self.nodes[v.0].values.to_vec();
            return self.accumulate(v, |g, _| f(g, &copy));
        }
        let (target, source) = if v.0 < other.0 {
            let (lo, hi) = self.nodes.split_at_mut(other.0);
            (&mut lo[v.0], &hi[0])
        } else {
            let (lo, hi) = self.nodes.split_at_mut(v.0);
            (&mut hi[0], &lo[other.0])
        };
        let len = target.values.len();
        let mut g = target.grad.take().unwrap_or_else(|| vec![0.0; len]);
        f(&mut g, &source.values);
        target.grad = Some(g);
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        let out_shape = self.nodes[id].shape.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let n = self.nodes[b.0].shape[1];
                {
                    self.accumulate_with(a, b, |ga, bv| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[i * k + p] += dot(grow, brow);
                            }
                        }
                    });
                }
                {
                    self.accumulate_with(b, a, |gb, av| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for (x, y) in gbrow.iter_mut().zip(grow) {
                                    *x += aip * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                let broadcast = self.nodes[b.0].values.len() != g.len();
                self.accumulate(b, |gb, _| {
                    if broadcast {
                        let cols = gb.len();
                        for row in g.chunks(cols) {
                            add_into(gb, row);
                        }
                    } else {
                        add_into(gb, g);
                    }
                });
            }
            Op::Mul(a, b) => {
                self.accumulate_with(a, b, |ga, bv| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.accumulate_with(b, a, |gb, av| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(a, |ga, _| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += s * gi;
                }
            }),
            Op::Tanh(a) => {
                self.accumulate_with(a, Var(id), |ga, y| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate_with(a, Var(id), |ga, y| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = *out_shape.last().unwrap();
                self.accumulate_with(a, Var(id), |ga, y| {
                    for ((gx, gy), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let inner = dot(gy, yr);
                        for ((x, gi), yi) in gx.iter_mut().zip(gy).zip(yr) {
                            *x += yi * (gi - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = *out_shape.last().unwrap();
                self.accumulate_with(a, Var(id), |ga, y| {
                    for ((gx, gy), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = gy.iter().sum();
                        for ((x, gi), yi) in gx.iter_mut().zip(gy).zip(yr) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Log(a) => self.accumulate(a, |ga, av| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi / ai;
                }
            }),
            Op::Concat(parts, axis) => {
                let out_cols = out_shape[1];
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = dims2(&self.nodes[p.0].shape);
                    let off = offset;
                    self.accumulate(p, |gp, _| {
                        if axis == 0 {
                            add_into(gp, &g[off * out_cols..(off + pr) * out_cols]);
                        } else {
                            for r in 0..pr {
                                let src = &g[r * out_cols + off..r * out_cols + off + pc];
                                add_into(&mut gp[r * pc..(r + 1) * pc], src);
                            }
                        }
                    });
                    offset += if axis == 0 { pr } else { pc };
                }
            }
            Op::EmbedLookup(table, ids) => {
                let cols = self.nodes[table.0].shape[1];
                self.accumulate(table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Pick(a, idx) => {
                let cols = self.nodes[a.0].shape[1];
                self.accumulate(a, |ga, _| {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |ga, _| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Relu(a) => self.accumulate(a, |ga, av| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    if *ai > 0.0 {
                        *x += gi;
                    }
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = dims2(&self.nodes[a.0].shape);
                self.accumulate(a, |ga, _| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
        }
    }

    fn evaluate(&self, op: &Op) -> Result<(Vec<usize>, Vec<f64>)> {
        let name = op.primitive().name();
        match op {
            Op::Leaf => Err(TensorError::Invalid("leaves are not evaluated".into())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(mismatch(name, sa, sb));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                Ok((vec![m, n], matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n)))
            }
            Op::Add(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                if na.shape == nb.shape {
                    let v = na.values.iter().zip(nb.values.iter()).map(|(x, y)| x + y).collect();
                    Ok((na.shape.clone(), v))
                } else if na.shape.len() == 2 && nb.shape == [1, na.shape[1]] {
                    let cols = na.shape[1];
                    let mut v = na.values.to_vec();
                    for row in v.chunks_mut(cols) {
                        add_into(row, &nb.values);
                    }
                    Ok((na.shape.clone(), v))
                } else {
                    Err(mismatch(name, &na.shape, &nb.shape))
                }
            }
            Op::Mul(a, b) => {
                let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                if na.shape != nb.shape {
                    return Err(mismatch(name, &na.shape, &nb.shape));
                }
                let v = na.values.iter().zip(nb.values.iter()).map(|(x, y)| x * y).collect();
                Ok((na.shape.clone(), v))
            }
            Op::Scale(a, s) => Ok(self.map(*a, |x| x * s)),
            Op::Tanh(a) => Ok(self.map(*a, f64::tanh)),
            Op::Sigmoid(a) => Ok(self.map(*a, sigmoid)),
            Op::Log(a) => Ok(self.map(*a, f64::ln)),
            Op::Relu(a) => Ok(self.map(*a, |x| if x > 0.0 { x } else { 0.0 })),
            Op::Softmax(a) => {
                let n = &self.nodes[a.0];
                let cols = *n.shape.last().unwrap();
                let mut v = n.values.to_vec();
                v.chunks_mut(cols).for_each(softmax_in_place);
                Ok((n.shape.clone(), v))
            }
            Op::LogSoftmax(a) => {
                let n = &self.nodes[a.0];
                let cols = *n.shape.last().unwrap();
                let mut v = n.values.to_vec();
                v.chunks_mut(cols).for_each(log_softmax_in_place);
                Ok((n.shape.clone(), v))
            }
            Op::Concat(parts, axis) => self.concat_values(parts, *axis),
            Op::EmbedLookup(table, ids) => {
                let n = &self.nodes[table.0];
                let (rows, cols) = match n.shape.as_slice() {
                    [r, c] => (*r, *c),
                    _ => return Err(TensorError::Invalid(format!("{name}: table must be 2-D, got {:?}", n.shape))),
                };
                if ids.is_empty() {
                    return Err(TensorError::Invalid(format!("{name}: empty id list")));
                }
                let mut v = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= rows {
                        return Err(TensorError::IndexOutOfRange { op: name, index: id, extent: rows });
                    }
                    v.extend_from_slice(&n.values[id * cols..(id + 1) * cols]);
                }
                Ok((vec![ids.len(), cols], v))
            }
            Op::Pick(a, idx) => {
                let n = &self.nodes[a.0];
                let (rows, cols) = match n.shape.as_slice() {
                    [r, c] => (*r, *c),
                    _ => return Err(TensorError::Invalid(format!("{name}: input must be 2-D, got {:?}", n.shape))),
                };
                if idx.len() != rows {
                    return Err(mismatch(name, &n.shape, &[idx.len()]));
                }
                let mut v = Vec::with_capacity(rows);
                for (r, &c) in idx.iter().enumerate() {
                    if c >= cols {
                        return Err(TensorError::IndexOutOfRange { op: name, index: c, extent: cols });
                    }
                    v.push(n.values[r * cols + c]);
                }
                Ok((vec![rows, 1], v))
            }
            Op::Sum(a) => Ok((vec![1], vec![self.nodes[a.0].values.iter().sum()])),
            Op::Transpose(a) => {
                let n = &self.nodes[a.0];
                if n.shape.len() != 2 {
                    return Err(TensorError::Invalid(format!("{name}: input must be 2-D, got {:?}", n.shape)));
                }
                let (r, c) = (n.shape[0], n.shape[1]);
                let mut v = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        v[j * r + i] = n.values[i * c + j];
                    }
                }
                Ok((vec![c, r], v))
            }
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let n = &self.nodes[a.0];
        (n.shape.clone(), n.values.iter().map(|&x| f(x)).collect())
    }

    fn concat_values(&self, parts: &[Var], axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Invalid("concat: no inputs".into()));
        };
        let first_shape = &self.nodes[first.0].shape;
        if first_shape.len() != 2 || axis > 1 {
            return Err(TensorError::Invalid(format!("concat: need 2-D inputs and axis 0 or 1, got {first_shape:?} axis {axis}")));
        }
        let keep = 1 - axis;
        let mut along = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[keep] != first_shape[keep] {
                return Err(mismatch("concat", first_shape, s));
            }
            along += s[axis];
        }
        if axis == 0 {
            let mut v = Vec::with_capacity(along * first_shape[1]);
            for p in parts {
                v.extend_from_slice(&self.nodes[p.0].values);
            }
            Ok((vec![along, first_shape[1]], v))
        } else {
            let rows = first_shape[0];
            let mut v = Vec::with_capacity(rows * along);
            for r in 0..rows {
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    v.extend_from_slice(&self.nodes[p.0].values[r * c..(r + 1) * c]);
                }
            }
            Ok((vec![rows, along], v))
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (x, y) in crow.iter_mut().zip(brow) {
                *x += aip * y;
            }
        }
    }
    c
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x = *x - max - lse;
    }
}

/// Per-tensor outcome of [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradientCheckEntry {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradientCheckReport {
    pub entries: Vec<GradientCheckEntry>,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Settings for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradientCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients near zero
    /// are compared on an absolute scale.
    pub denominator_floor: f64,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        GradientCheckOptions {
            step: 1e-6,
            tolerance: 1e-4,
            denominator_floor: 1e-4,
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_builder` receives a fresh tape and one differentiable leaf per entry
/// of `params`, and must return a `[1]`-shaped loss. It is run twice on the
/// unperturbed parameters first; disagreement means it is non-deterministic
/// and the check is rejected.
pub fn gradient_check<F>(loss_builder: F, params: &[Tensor], opts: GradientCheckOptions) -> Result<GradientCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::Invalid(format!("gradient_check: step must be positive, got {}", opts.step)));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = loss_builder(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let (first, second) = (eval(params)?, eval(params)?);
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Invalid(format!(
            "gradient_check: loss builder is non-deterministic ({first} vs {second})"
        )));
    }

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = loss_builder(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..work[pi].len() {
            let orig = work[pi].values[j];
            work[pi].values[j] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].values[j] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].values[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.values[j];
            let abs = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs()).max(opts.denominator_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / denom);
        }
        entries.push(GradientCheckEntry {
            index: pi,
            shape: params[pi].shape.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradientCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}
