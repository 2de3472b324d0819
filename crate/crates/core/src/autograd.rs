//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation applied to a [`Var`] appends one node to its [`Tape`];
//! node inputs always have smaller indices, so walking the node list
//! backwards is a valid reverse topological order. A tape can be
//! differentiated exactly once.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Backward rule of a user-defined op: receives the output gradient, the
/// input values and the output value, and returns one optional gradient per
/// input (flat, same length as the input).
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>], &Tensor<T>) -> Vec<Option<Vec<T>>>>;

/// Marker for a gathered position that reads as zero (padding).
pub const GATHER_ZERO: usize = usize::MAX;

enum Op<T: Real> {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanRows(usize),
    Concat { a: usize, b: usize },
    Stack(Vec<usize>),
    Gather { src: usize, index: Arc<Vec<usize>> },
    Reshape(usize),
    Sum(usize),
    Custom {
        name: &'static str,
        inputs: Vec<usize>,
        backward: BackwardFn<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::MeanRows(_) => "mean_pool",
            Op::Concat { .. } => "concat",
            Op::Stack(_) => "stack",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of applied operations.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            grad_enabled: true,
        }
    }

    /// A tape on which no value requires a gradient; ops skip saving
    /// backward state.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, self.grad_enabled)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push(
            value,
            Op::Custom {
                name,
                inputs: ids.clone(),
                backward,
            },
            &ids,
        )
    }

    /// First node whose value contains NaN or infinity, reported by op name.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.borrow().iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// one. Leaves used several times accumulate within this pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: "scalar loss",
                shape: root.value.shape().to_vec(),
            });
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            log::warn!("backward called on a loss that does not depend on any differentiable leaf");
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
        }
        // Only leaves keep gradients.
        for (i, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, tb } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = out.shape()[1];
            if let Some(da) = slot(grads, nodes, *a) {
                // da = g · bᵀ (or g · b when b is already transposed)
                gemm(m, n, k, g, false, bv.data(), !tb, da, true);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                if *tb {
                    gemm(n, m, k, g, true, av.data(), false, db, true);
                } else {
                    gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (dout, din) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / din;
            if let Some(dx) = slot(grads, nodes, *x) {
                gemm(rows, dout, din, g, false, wv.data(), false, dx, true);
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                gemm(dout, rows, din, g, true, xv.data(), false, dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = slot(grads, nodes, *b) {
                    for row in g.chunks(dout) {
                        add_into(db, row);
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            for (id, s) in [(*a, T::one()), (*b, sign)] {
                if let Some(d) = slot(grads, nodes, id) {
                    if d.len() == g.len() {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + s * g);
                    } else {
                        d[0] = d[0] + s * g.iter().copied().sum::<T>();
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            for (id, other) in [(*a, &bv), (*b, &av)] {
                if let Some(d) = slot(grads, nodes, id) {
                    let o = other.data();
                    if d.len() == g.len() {
                        for (j, dj) in d.iter_mut().enumerate() {
                            let ov = if o.len() == 1 { o[0] } else { o[j] };
                            *dj = *dj + g[j] * ov;
                        }
                    } else {
                        let s: T = g.iter().zip(o).map(|(&g, &o)| g * o).sum();
                        d[0] = d[0] + s;
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + *c * g);
            }
        }
        Op::Offset(a) | Op::Reshape(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                add_into(d, g);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d = *d + g * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d = *d + g * (T::one() - y * y);
                }
            }
        }
        Op::Relu(a) => {
            let xv = nodes[*a].value.clone();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv.data()) {
                    if x > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for j in 0..n {
                        drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let total: T = grow.iter().copied().sum();
                    for j in 0..n {
                        drow[j] = drow[j] + grow[j] - yrow[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let dim = *out.shape().last().unwrap();
            let gam = nodes[*gamma].value.clone();
            if let Some(dg) = slot(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                    for j in 0..dim {
                        dg[j] = dg[j] + grow[j] * hrow[j];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                for grow in g.chunks(dim) {
                    add_into(db, grow);
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let nd = T::of(dim as f64);
                let mut dh = vec![T::zero(); dim];
                for (r, ((dxrow, grow), hrow)) in dx
                    .chunks_mut(dim)
                    .zip(g.chunks(dim))
                    .zip(xhat.chunks(dim))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..dim {
                        dh[j] = grow[j] * gam.data()[j];
                        s1 = s1 + dh[j];
                        s2 = s2 + dh[j] * hrow[j];
                    }
                    let scale = rstd[r] / nd;
                    for j in 0..dim {
                        dxrow[j] = dxrow[j] + scale * (nd * dh[j] - s1 - hrow[j] * s2);
                    }
                }
            }
        }
        Op::MeanRows(a) => {
            let rows = nodes[*a].value.shape()[0];
            let inv = T::one() / T::of(rows as f64);
            if let Some(d) = slot(grads, nodes, *a) {
                for drow in d.chunks_mut(g.len()) {
                    for (d, &g) in drow.iter_mut().zip(g) {
                        *d = *d + g * inv;
                    }
                }
            }
        }
        Op::Concat { a, b } => {
            let p = nodes[*a].value.shape().last().copied().unwrap_or(0);
            let q = nodes[*b].value.shape().last().copied().unwrap_or(0);
            let outer = if p + q == 0 { 0 } else { g.len() / (p + q) };
            if let Some(da) = slot(grads, nodes, *a) {
                for r in 0..outer {
                    add_into(&mut da[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for r in 0..outer {
                    add_into(&mut db[r * q..(r + 1) * q], &g[r * (p + q) + p..(r + 1) * (p + q)]);
                }
            }
        }
        Op::Stack(ids) => {
            let each = if ids.is_empty() { 0 } else { g.len() / ids.len() };
            for (k, &id) in ids.iter().enumerate() {
                if let Some(d) = slot(grads, nodes, id) {
                    add_into(d, &g[k * each..(k + 1) * each]);
                }
            }
        }
        Op::Gather { src, index } => {
            if let Some(d) = slot(grads, nodes, *src) {
                for (&j, &gv) in index.iter().zip(g) {
                    if j != GATHER_ZERO {
                        d[j] = d[j] + gv;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Custom {
            inputs, backward, ..
        } => {
            let values: Vec<Tensor<T>> = inputs.iter().map(|&j| nodes[j].value.clone()).collect();
            let contributions = backward(g, &values, out);
            for (&id, c) in inputs.iter().zip(contributions) {
                if let (Some(c), Some(d)) = (c, slot(grads, nodes, id)) {
                    add_into(d, &c);
                }
            }
        }
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf did not influence the loss
    /// or does not require a gradient.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get(v.id)?.as_ref().map(|g| Tensor::from_parts(v.shape(), g.clone()))
    }

    pub(crate) fn take_raw(&mut self, id: usize) -> Option<Vec<T>> {
        self.grads.get_mut(id)?.take()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

fn rank_err(op: &'static str, expected: &'static str, shape: &[usize]) -> Error {
    Error::Rank {
        op,
        expected,
        shape: shape.to_vec(),
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        self.tape.push(value, op, &[self.id])
    }

    /// `a · b` for rank-2 operands.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::dim("matmul", ash, bsh));
        }
        let (m, k) = (ash[0], ash[1]);
        let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != kb {
            return Err(Error::dim("matmul", ash, bsh));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), tb, &mut out, false);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                tb,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Affine map `x · Wᵀ + b` with `W: out×in`; `x` is `[in]` or `[rows×in]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let [dout, din] = wv.shape()[..] else {
            return Err(rank_err("linear", "rank-2 weight", wv.shape()));
        };
        let (rows, cols) = x
            .as_matrix_dims()
            .ok_or_else(|| rank_err("linear", "rank-1 or rank-2 input", x.shape()))?;
        if cols != din {
            return Err(Error::dim("linear", x.shape(), wv.shape()));
        }
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(Error::dim("linear bias", bv.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, din, dout, x.data(), false, wv.data(), true, &mut out, b.is_some());
        let shape = if x.rank() == 1 { vec![dout] } else { vec![rows, dout] };
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            inputs.push(b.id);
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            &inputs,
        ))
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (shape, data): (Vec<usize>, Vec<T>) = if a.shape() == b.shape() {
            (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if a.len() == 1 {
            let s = a.item();
            (b.shape().to_vec(), b.data().iter().map(|&y| f(s, y)).collect())
        } else if b.len() == 1 {
            let s = b.item();
            (a.shape().to_vec(), a.data().iter().map(|&x| f(x, s)).collect())
        } else {
            return Err(Error::dim(name, a.shape(), b.shape()));
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, data), op, &[self.id, rhs.id]))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale(self.id, c), v)
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::Offset(self.id), v)
    }

    /// `1 − x`, used for the complementary interpolation weight.
    pub fn one_minus(self) -> Var<'t, T> {
        self.scale(-T::one()).offset(T::one())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(Op::Relu(self.id), v)
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.tanh());
        self.unary(Op::Tanh(self.id), v)
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = last_extent(&x, "softmax")?;
        let mut out = x.to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        Ok(self.unary(Op::Softmax(self.id), Tensor::from_parts(x.shape().to_vec(), out)))
    }

    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = last_extent(&x, "log_softmax")?;
        let mut out = x.to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        Ok(self.unary(
            Op::LogSoftmax(self.id),
            Tensor::from_parts(x.shape().to_vec(), out),
        ))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layernorm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = last_extent(&x, "layernorm")?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layernorm", x.shape(), gv.shape()));
        }
        let rows = x.len() / d;
        let nd = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let (xhat, rstd) = if self.tape.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Column means of a `[rows×d]` matrix.
    pub fn mean_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [rows, d] = x.shape()[..] else {
            return Err(rank_err("mean_pool", "rank 2", x.shape()));
        };
        if rows == 0 {
            return Err(Error::EmptyInput { op: "mean_pool" });
        }
        let mut out = vec![T::zero(); d];
        for row in x.data().chunks(d) {
            add_into(&mut out, row);
        }
        let inv = T::one() / T::of(rows as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.unary(Op::MeanRows(self.id), Tensor::from_parts(vec![d], out)))
    }

    /// Concatenation along the last axis.
    pub fn concat(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != bsh.len() || ash.is_empty() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1] {
            return Err(Error::dim("concat", ash, bsh));
        }
        let p = *ash.last().unwrap();
        let q = *bsh.last().unwrap();
        let outer: usize = ash[..ash.len() - 1].iter().product();
        let mut out = Vec::with_capacity(outer * (p + q));
        for r in 0..outer {
            out.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = p + q;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "stack" })?;
        let shape = first.shape();
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape() != shape.as_slice() {
                return Err(Error::dim("stack", &shape, v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&shape);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first
            .tape
            .push(Tensor::from_parts(out_shape, data), Op::Stack(ids.clone()), &ids))
    }

    /// `out[i] = self[index[i]]`, with [`GATHER_ZERO`] reading as zero.
    pub fn gather(self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", &[index.len()], shape));
        }
        let src = x.data();
        let mut out = Vec::with_capacity(index.len());
        for &j in index.iter() {
            if j == GATHER_ZERO {
                out.push(T::zero());
            } else if j < src.len() {
                out.push(src[j]);
            } else {
                return Err(Error::dim("gather", x.shape(), &[j]));
            }
        }
        Ok(self.unary(
            Op::Gather {
                src: self.id,
                index,
            },
            Tensor::from_parts(shape.to_vec(), out),
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = *shape.last().ok_or_else(|| rank_err("slice", "rank ≥ 1", &shape))?;
        if start + len > n {
            return Err(Error::dim("slice", &shape, &[start, len]));
        }
        let outer = shape.iter().product::<usize>() / n.max(1);
        let index: Vec<usize> = (0..outer)
            .flat_map(|r| (start..start + len).map(move |c| r * n + c))
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        self.gather(Arc::new(index), &out_shape)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let [r, c] = shape[..] else {
            return Err(rank_err("transpose", "rank 2", &shape));
        };
        let index: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(Arc::new(index), &[c, r])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    /// Single element `index` of the flattened value, as a scalar.
    pub fn select(self, index: usize) -> Result<Var<'t, T>> {
        self.gather(Arc::new(vec![index]), &[])
    }
}

fn last_extent<T: Real>(x: &Tensor<T>, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&n) if n >= 1 => Ok(n),
        _ => Err(Error::EmptyInput { op }),
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
