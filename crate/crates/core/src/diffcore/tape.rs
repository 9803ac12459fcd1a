//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! cheap copyable handle into it. Parameters enter through [`Tape::param`];
//! [`Tape::backward`] then returns their gradients and consumes the tape.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::optim::{ParamId, ParamStore};
use super::tensor::{numel, MatmulPlan, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnOp {
    Neg,
    Relu,
    Sigmoid,
    LogSigmoid,
    Log,
    Exp,
    Abs,
    Square,
}

enum Op<F: Real> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize, MatmulPlan),
    Binary(BinOp, usize, usize),
    Unary(UnOp, usize),
    Scale(usize, F),
    Shift(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Reshape(usize),
    Transpose {
        x: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        len: usize,
        start: usize,
        count: usize,
        inner: usize,
    },
    SelectRows {
        x: usize,
        indices: Vec<usize>,
        cols: usize,
    },
    Sum(usize),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// One forward/backward recording.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
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

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that does not participate in differentiation.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter leaf. Repeated calls for the same id share a node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if parts.len() == 1 {
            return Ok(*first);
        }
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut total = 0;
        let mut spec = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s[..axis] == base[..axis]
                && s[axis + 1..] == base[axis + 1..];
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            spec.push((p.id, s[axis]));
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for &(id, len) in &spec {
                    let chunk = len * inner;
                    data.extend_from_slice(&nodes[id].value.data()[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = spec.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: spec,
                outer,
                inner,
            },
            rg,
        ))
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Back-propagates from a scalar loss and returns parameter gradients.
    ///
    /// The tape is single-use: a second call fails with a contract error.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward called on a consumed tape; re-run the forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![F::one()]);
        let mut out = Gradients { grads: Vec::new() };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, node, g, &mut grads, &mut out);
        }
        Ok(out)
    }
}

fn accumulate<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

fn backprop_node<F: Real>(
    nodes: &[Node<F>],
    id: usize,
    node: &Node<F>,
    g: Vec<F>,
    grads: &mut [Option<Vec<F>>],
    out: &mut Gradients<F>,
) {
    let len_of = |i: usize| nodes[i].value.len();
    let live = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Param(pid) => {
            if out.grads.len() <= pid.0 {
                out.grads.resize_with(pid.0 + 1, || None);
            }
            let shape = node.value.shape().to_vec();
            match &mut out.grads[pid.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, g).expect("param grad shape")),
            }
        }
        Op::MatMul(a, b, plan) => {
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if live(*a) {
                let ga = accumulate(&mut grads[*a], len_of(*a));
                for i in 0..plan.batch {
                    // dA = dC · Bᵀ
                    let off = plan.a_off(i);
                    F::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        false,
                        &bv[plan.b_off(i)..],
                        true,
                        &mut ga[off..off + m * k],
                        true,
                    );
                }
            }
            if live(*b) {
                let gb = accumulate(&mut grads[*b], len_of(*b));
                for i in 0..plan.batch {
                    // dB = Aᵀ · dC
                    let off = plan.b_off(i);
                    F::gemm(
                        k,
                        m,
                        n,
                        &av[plan.a_off(i)..],
                        true,
                        &g[i * m * n..],
                        false,
                        &mut gb[off..off + k * n],
                        true,
                    );
                }
            }
        }
        Op::Binary(op, a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (la, lb) = (av.len(), bv.len());
            let y = node.value.data();
            if live(*a) {
                let ga = accumulate(&mut grads[*a], la);
                for (i, &gi) in g.iter().enumerate() {
                    let (x, z) = (av[i % la], bv[i % lb]);
                    let d = match op {
                        BinOp::Add | BinOp::Sub => gi,
                        BinOp::Mul => gi * z,
                        BinOp::Div => gi / z,
                        BinOp::Min => {
                            if x <= z {
                                gi
                            } else {
                                F::zero()
                            }
                        }
                        BinOp::Max => {
                            if x >= z {
                                gi
                            } else {
                                F::zero()
                            }
                        }
                    };
                    ga[i % la] = ga[i % la] + d;
                }
            }
            if live(*b) {
                let gb = accumulate(&mut grads[*b], lb);
                for (i, &gi) in g.iter().enumerate() {
                    let (x, z) = (av[i % la], bv[i % lb]);
                    let d = match op {
                        BinOp::Add => gi,
                        BinOp::Sub => -gi,
                        BinOp::Mul => gi * x,
                        BinOp::Div => -gi * y[i] / z,
                        BinOp::Min => {
                            if x <= z {
                                F::zero()
                            } else {
                                gi
                            }
                        }
                        BinOp::Max => {
                            if x >= z {
                                F::zero()
                            } else {
                                gi
                            }
                        }
                    };
                    gb[i % lb] = gb[i % lb] + d;
                }
            }
        }
        Op::Unary(op, x) => {
            let xv = nodes[*x].value.data();
            let y = node.value.data();
            let gx = accumulate(&mut grads[*x], xv.len());
            for i in 0..g.len() {
                let d = match op {
                    UnOp::Neg => -g[i],
                    UnOp::Relu => {
                        if xv[i] > F::zero() {
                            g[i]
                        } else {
                            F::zero()
                        }
                    }
                    UnOp::Sigmoid => g[i] * y[i] * (F::one() - y[i]),
                    UnOp::LogSigmoid => g[i] * sigmoid(-xv[i]),
                    UnOp::Log => g[i] / xv[i],
                    UnOp::Exp => g[i] * y[i],
                    UnOp::Abs => {
                        if xv[i] > F::zero() {
                            g[i]
                        } else if xv[i] < F::zero() {
                            -g[i]
                        } else {
                            F::zero()
                        }
                    }
                    UnOp::Square => g[i] * (xv[i] + xv[i]),
                };
                gx[i] = gx[i] + d;
            }
        }
        Op::Scale(x, c) => {
            let gx = accumulate(&mut grads[*x], g.len());
            for (a, &b) in gx.iter_mut().zip(&g) {
                *a = *a + b * *c;
            }
        }
        Op::Shift(x) | Op::Reshape(x) => {
            let gx = accumulate(&mut grads[*x], g.len());
            for (a, &b) in gx.iter_mut().zip(&g) {
                *a = *a + b;
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            let gx = accumulate(&mut grads[*x], g.len());
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |t: usize| (o * len + t) * inner + j;
                    let mut dot = F::zero();
                    for t in 0..*len {
                        dot = dot + g[at(t)] * y[at(t)];
                    }
                    for t in 0..*len {
                        let i = at(t);
                        gx[i] = gx[i] + y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = nodes[*gamma].value.data();
            let cols = gam.len();
            let rows = g.len() / cols;
            let nf = F::of(cols as f64);
            if live(*x) {
                let gx = accumulate(&mut grads[*x], g.len());
                let mut dxhat = vec![F::zero(); cols];
                for r in 0..rows {
                    let base = r * cols;
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for c in 0..cols {
                        dxhat[c] = g[base + c] * gam[c];
                        s1 = s1 + dxhat[c];
                        s2 = s2 + dxhat[c] * xhat[base + c];
                    }
                    let scale = inv_std[r] / nf;
                    for c in 0..cols {
                        let d = scale * (nf * dxhat[c] - s1 - xhat[base + c] * s2);
                        gx[base + c] = gx[base + c] + d;
                    }
                }
            }
            if live(*gamma) {
                let gg = accumulate(&mut grads[*gamma], cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if live(*beta) {
                let gb = accumulate(&mut grads[*beta], cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] = gb[c] + g[r * cols + c];
                    }
                }
            }
        }
        Op::Transpose {
            x,
            batch,
            rows,
            cols,
        } => {
            let gx = accumulate(&mut grads[*x], g.len());
            // output is [batch, cols, rows]
            for bi in 0..*batch {
                let off = bi * rows * cols;
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[off + r * cols + c] = gx[off + r * cols + c] + g[off + c * rows + r];
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
        } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if live(pid) {
                    let chunk = len * inner;
                    let gp = accumulate(&mut grads[pid], outer * chunk);
                    for o in 0..*outer {
                        let src = o * total * inner + offset * inner;
                        for t in 0..chunk {
                            gp[o * chunk + t] = gp[o * chunk + t] + g[src + t];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            x,
            outer,
            len,
            start,
            count,
            inner,
        } => {
            let gx = accumulate(&mut grads[*x], outer * len * inner);
            let chunk = count * inner;
            for o in 0..*outer {
                let dst = o * len * inner + start * inner;
                for t in 0..chunk {
                    gx[dst + t] = gx[dst + t] + g[o * chunk + t];
                }
            }
        }
        Op::SelectRows { x, indices, cols } => {
            let gx = accumulate(&mut grads[*x], len_of(*x));
            for (r, &src) in indices.iter().enumerate() {
                for c in 0..*cols {
                    gx[src * cols + c] = gx[src * cols + c] + g[r * cols + c];
                }
            }
        }
        Op::Sum(x) => {
            let gx = accumulate(&mut grads[*x], len_of(*x));
            for a in gx.iter_mut() {
                *a = *a + g[0];
            }
        }
    }
    let _ = id;
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn log_sigmoid<F: Real>(x: F) -> F {
    x.min(F::zero()) - (F::one() + (-x.abs()).exp()).ln()
}

/// Checks that one shape is a trailing suffix of the other (or a single
/// element) and returns the output shape.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if numel(short) == 1 {
        return Ok(long.to_vec());
    }
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn node_id(&self) -> usize {
        self.id
    }

    fn node_value(&self) -> Ref<'t, Tensor<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor<F> {
        self.node_value().clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.node_value())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node_value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, op: UnOp) -> Var<'t, F> {
        let value = {
            let x = self.node_value();
            x.map(|v| match op {
                UnOp::Neg => -v,
                UnOp::Relu => v.max(F::zero()),
                UnOp::Sigmoid => sigmoid(v),
                UnOp::LogSigmoid => log_sigmoid(v),
                UnOp::Log => v.ln(),
                UnOp::Exp => v.exp(),
                UnOp::Abs => v.abs(),
                UnOp::Square => v * v,
            })
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Unary(op, self.id), rg)
    }

    fn binary(&self, op: BinOp, name: &'static str, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let value = {
            let a = self.node_value();
            let b = other.node_value();
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            let (av, bv) = (a.data(), b.data());
            let (la, lb) = (av.len(), bv.len());
            Tensor::from_fn(shape, |i| {
                let (x, z) = (av[i % la], bv[i % lb]);
                match op {
                    BinOp::Add => x + z,
                    BinOp::Sub => x - z,
                    BinOp::Mul => x * z,
                    BinOp::Div => x / z,
                    BinOp::Min => {
                        if x <= z {
                            x
                        } else {
                            z
                        }
                    }
                    BinOp::Max => {
                        if x >= z {
                            x
                        } else {
                            z
                        }
                    }
                }
            })
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Binary(op, self.id, other.id), rg))
    }

    /// Elementwise sum; `other` may be a trailing-suffix broadcast.
    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Add, "add", other)
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Sub, "sub", other)
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Mul, "mul", other)
    }

    pub fn div(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Div, "div", other)
    }

    pub fn minimum(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Min, "minimum", other)
    }

    pub fn maximum(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(BinOp::Max, "maximum", other)
    }

    pub fn neg(&self) -> Var<'t, F> {
        self.unary(UnOp::Neg)
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.unary(UnOp::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.unary(UnOp::Sigmoid)
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&self) -> Var<'t, F> {
        self.unary(UnOp::LogSigmoid)
    }

    pub fn ln(&self) -> Var<'t, F> {
        self.unary(UnOp::Log)
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(UnOp::Exp)
    }

    pub fn abs(&self) -> Var<'t, F> {
        self.unary(UnOp::Abs)
    }

    pub fn square(&self) -> Var<'t, F> {
        self.unary(UnOp::Square)
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        let value = self.node_value().map(|v| v * c);
        let rg = self.requires_grad();
        self.tape.push(value, Op::Scale(self.id, c), rg)
    }

    pub fn add_scalar(&self, c: F) -> Var<'t, F> {
        let value = self.node_value().map(|v| v + c);
        let rg = self.requires_grad();
        self.tape.push(value, Op::Shift(self.id), rg)
    }

    /// A copy of the current value cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }

    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (value, plan) = {
            let a = self.node_value();
            let b = other.node_value();
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let mut out = vec![F::zero(); numel(&plan.out_shape)];
            plan.forward(a.data(), b.data(), &mut out);
            (Tensor::new(plan.out_shape.clone(), out)?, plan)
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id, plan), rg))
    }

    /// `x · W + b` for `x[.., in]`, `W[in, out]`, `b[out]`.
    pub fn linear(&self, weight: &Var<'t, F>, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul(weight)?.add(bias)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let (value, outer, len, inner) = {
            let x = self.node_value();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::shape("softmax", shape, &[axis]));
            }
            let outer = numel(&shape[..axis]);
            let len = shape[axis];
            let inner = numel(&shape[axis + 1..]);
            let xv = x.data();
            let mut out = vec![F::zero(); xv.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |t: usize| (o * len + t) * inner + j;
                    let mut max = F::neg_infinity();
                    for t in 0..len {
                        max = max.max(xv[at(t)]);
                    }
                    let mut sum = F::zero();
                    for t in 0..len {
                        let e = (xv[at(t)] - max).exp();
                        out[at(t)] = e;
                        sum = sum + e;
                    }
                    for t in 0..len {
                        out[at(t)] = out[at(t)] / sum;
                    }
                }
            }
            (Tensor::new(shape.to_vec(), out)?, outer, len, inner)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, F>, beta: &Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let (value, xhat, inv_std) = {
            let x = self.node_value();
            let g = gamma.node_value();
            let b = beta.node_value();
            let cols = *x.shape().last().unwrap();
            if g.len() != cols || b.len() != cols {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.len() / cols;
            let nf = F::of(cols as f64);
            let xv = x.data();
            let mut xhat = vec![F::zero(); xv.len()];
            let mut inv_std = vec![F::zero(); rows];
            let mut out = vec![F::zero(); xv.len()];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
                let var = row
                    .iter()
                    .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                    / nf;
                let is = F::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, F>> {
        let (value, batch, rows, cols) = {
            let x = self.node_value();
            let s = x.shape();
            if s.len() < 2 {
                return Err(Error::shape("transpose", s, &[]));
            }
            let rows = s[s.len() - 2];
            let cols = s[s.len() - 1];
            let batch = numel(&s[..s.len() - 2]);
            let xv = x.data();
            let mut out = vec![F::zero(); xv.len()];
            for bi in 0..batch {
                let off = bi * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        out[off + c * rows + r] = xv[off + r * cols + c];
                    }
                }
            }
            let mut shape = s.to_vec();
            let n = shape.len();
            shape.swap(n - 1, n - 2);
            (Tensor::new(shape, out)?, batch, rows, cols)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Transpose {
                x: self.id,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// `count` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, count: usize) -> Result<Var<'t, F>> {
        let (value, outer, len, inner) = {
            let x = self.node_value();
            let s = x.shape();
            if axis >= s.len() || count == 0 || start + count > s[axis] {
                return Err(Error::shape("slice", s, &[axis, start, count]));
            }
            let outer = numel(&s[..axis]);
            let len = s[axis];
            let inner = numel(&s[axis + 1..]);
            let mut data = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                let src = o * len * inner + start * inner;
                data.extend_from_slice(&x.data()[src..src + count * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = count;
            (Tensor::new(shape, data)?, outer, len, inner)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                outer,
                len,
                start,
                count,
                inner,
            },
            rg,
        ))
    }

    /// Gathers entries of the leading axis (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t, F>> {
        let (value, cols) = {
            let x = self.node_value();
            let s = x.shape();
            let rows = s[0];
            let cols = numel(&s[1..]);
            if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::shape("select_rows", s, indices));
            }
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
            }
            let mut shape = s.to_vec();
            shape[0] = indices.len();
            (Tensor::new(shape, data)?, cols)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::SelectRows {
                x: self.id,
                indices: indices.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Var<'t, F> {
        let total = self
            .node_value()
            .data()
            .iter()
            .fold(F::zero(), |s, &v| s + v);
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t, F> {
        let n = F::of(self.node_value().len() as f64);
        self.sum().scale(F::one() / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::optim::ParamGroup;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.insert(n, ParamGroup::Rest, t.clone()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (store, ids) = store_with(&[("p", Tensor::from_f64([1], &[3.0]).unwrap())]);
        let tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let loss = p.square().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_a_contract_error() {
        let (store, ids) = store_with(&[("p", Tensor::from_f64([1], &[3.0]).unwrap())]);
        let tape = Tape::new();
        let loss = tape.param(&store, ids[0]).square().sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (store, ids) = store_with(&[("p", Tensor::from_f64([2], &[1.0, 2.0]).unwrap())]);
        let tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::full([4], 0.3)).softmax(0).unwrap();
        for v in u.value().data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let s = tape
            .constant(Tensor::from_f64([2], &[1000.0, 0.0]).unwrap())
            .softmax(0)
            .unwrap()
            .value();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let y = x.softmax(0).unwrap().value();
        for c in 0..3 {
            let s = y.data()[c] + y.data()[3 + c];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::full([2], 0.0));
        let c = tape.constant(Tensor::full([1, 2], 5.0));
        assert!(c
            .layer_norm(&g, &b, 1e-5)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        let r = tape.constant(Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
        let y = r.layer_norm(&g, &b, 1e-5).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-200.0f32, 0.0, 200.0]).unwrap());
        let y = x.log_sigmoid().value();
        assert!((y.data()[0] + 200.0).abs() < 1e-3);
        assert!((y.data()[1] + std::f32::consts::LN_2).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::full([3], 1.0));
        assert_eq!(a.add(&b).unwrap().shape(), vec![2, 3]);
        let bad = tape.constant(Tensor::full([2], 1.0));
        assert!(matches!(a.add(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 3], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.slice(1, 2, 3).unwrap().value(), b.value());
        assert_eq!(c.slice(1, 0, 2).unwrap().value(), a.value());
    }
}
