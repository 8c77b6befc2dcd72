//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough saved state for its backward
//! rule, so node order is already a topological order. [`Graph::backward`]
//! walks the nodes once in reverse and returns the gradients of every
//! trainable parameter that was read. A parameter read several times (shared
//! weights) maps to a single leaf, so its uses accumulate additively.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
#[doc(hidden)]
pub use gradcheck::grad_check_corrupted;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{axis_layout, matmul_values, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Square,
    Scale(f64),
    AddScalar(f64),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Unary { kind: Unary, x: Var },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Broadcast { x: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    AddRow { x: Var, row: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu { x: Var, cdf: Vec<f64> },
    CrossEntropy { logits: Var, label: usize },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients of trainable parameters, ordered by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| &self.entries[k].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(id, t)| (*id, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    corrupt_matmul_backward: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            corrupt_matmul_backward: false,
        }
    }

    /// Test hook: scales the left-operand gradient of every matmul by 1.5 so
    /// that gradient checks can be shown to fail.
    #[doc(hidden)]
    pub fn with_corrupted_backward(mut self) -> Self {
        self.corrupt_matmul_backward = true;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated reads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- products -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, true)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_ext(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = matmul_values(self.value(a), ta, self.value(b), tb)?;
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.rank() == 0 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.rank() == 0 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        self.push(name, out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let (name, out) = {
            let t = self.value(x);
            match kind {
                Unary::Neg => ("neg", t.map(|v| -v)),
                Unary::Exp => ("exp", t.map(f64::exp)),
                Unary::Square => ("square", t.map(|v| v * v)),
                Unary::Scale(c) => ("scale", t.map(|v| c * v)),
                Unary::AddScalar(c) => ("add_scalar", t.map(|v| v + c)),
            }
        };
        self.push(name, out, Op::Unary { kind, x }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cdf: Vec<f64> = t.data().iter().map(|&v| normal_cdf(v)).collect();
        let out = t.data().iter().zip(&cdf).map(|(v, c)| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("gelu", out, Op::Gelu { x, cdf }, &[x])
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, b) = (self.value(x), self.value(row));
        let (_, c) = t.dims2()?;
        if b.shape() != [c] {
            return Err(Error::shape("add_row", t.shape(), b.shape()));
        }
        let bd = b.data();
        let mut out = t.data().to_vec();
        for r in out.chunks_mut(c) {
            r.iter_mut().zip(bd).for_each(|(v, w)| *v += w);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("add_row", out, Op::AddRow { x, row }, &[x, row])
    }

    // ---- reductions and shape ops ----------------------------------------

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn reduce_axis(&self, x: Var, axis: usize, mean: bool) -> Tensor {
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out).expect("reduced shape is consistent")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let out = self.reduce_axis(x, axis, false);
        self.push("sum_axis", out, Op::SumAxis { x, axis }, &[x])
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let out = self.reduce_axis(x, axis, true);
        self.push("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    /// Inserts a new axis of length `extent` at position `axis`, replicating
    /// the input along it.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, extent: usize) -> Result<Var> {
        let t = self.value(x);
        if axis > t.rank() {
            return Err(Error::Axis {
                op: "broadcast_axis",
                axis,
                rank: t.rank(),
            });
        }
        let mut shape = t.shape().to_vec();
        shape.insert(axis, extent);
        let (outer, _, inner) = axis_layout(&shape, axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            let src = &d[o * inner..(o + 1) * inner];
            for _ in 0..extent {
                out.extend_from_slice(src);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("broadcast_axis", out, Op::Broadcast { x, axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.value(x).shape(), shape))?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, w], out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        t.dims2()?;
        let out = t
            .slice_rows(start, end)
            .map_err(|_| Error::shape("slice_rows", t.shape(), &[start, end]))?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_cols of nothing".into()))?;
        let rows = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    // ---- fused layers ---------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_layout(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (d[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes each row (trailing axis) to zero mean and unit variance,
    /// then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let (g, b) = (self.value(gain), self.value(bias));
        if t.rank() == 0 || g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape("layer_norm", t.shape(), g.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// `−log softmax(logits)[label]` as a rank-0 tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::LabelRange {
                label,
                classes: z.len(),
            });
        }
        let loss = nll(z, label);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, label }, &[logits])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns `∂root/∂p` for every
    /// trainable parameter the root depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(rt.shape()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                op => self.backward_op(Var(i), op, &g, &mut grads)?,
            }
        }
        let mut entries: Vec<(ParamId, Tensor)> = self
            .param_nodes
            .iter()
            .filter_map(|(&id, &v)| {
                let g = grads.get(v.0)?.as_ref()?;
                self.store.is_trainable(id).then(|| (id, g.clone()))
            })
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, out: Var, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = self.value(out);
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let mut da = if *ta {
                        matmul_values(bv, *tb, g, true)?
                    } else {
                        matmul_values(g, false, bv, !*tb)?
                    };
                    if self.corrupt_matmul_backward {
                        da.data_mut().iter_mut().for_each(|v| *v *= 1.5);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = if *tb {
                        matmul_values(g, true, av, *ta)?
                    } else {
                        matmul_values(av, !*ta, g, false)?
                    };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, k: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[k] };
                let fold = |data: Vec<f64>, like: &Tensor| {
                    if like.shape() == g.shape() {
                        Tensor::new(g.shape().to_vec(), data).unwrap()
                    } else {
                        Tensor::scalar(data.iter().sum())
                    }
                };
                let gd = g.data();
                if self.nodes[a.0].requires_grad {
                    let da = (0..gd.len())
                        .map(|k| match kind {
                            Binary::Add | Binary::Sub => gd[k],
                            Binary::Mul => gd[k] * at(bv, k),
                            Binary::Div => gd[k] / at(bv, k),
                        })
                        .collect();
                    self.accumulate(grads, *a, fold(da, av));
                }
                if self.nodes[b.0].requires_grad {
                    let db = (0..gd.len())
                        .map(|k| match kind {
                            Binary::Add => gd[k],
                            Binary::Sub => -gd[k],
                            Binary::Mul => gd[k] * at(av, k),
                            Binary::Div => {
                                let z = at(bv, k);
                                -gd[k] * at(av, k) / (z * z)
                            }
                        })
                        .collect();
                    self.accumulate(grads, *b, fold(db, bv));
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x);
                let dx: Vec<f64> = match kind {
                    Unary::Neg => g.data().iter().map(|v| -v).collect(),
                    Unary::Exp => g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect(),
                    Unary::Square => g.data().iter().zip(xv.data()).map(|(a, b)| 2.0 * a * b).collect(),
                    Unary::Scale(c) => g.data().iter().map(|v| c * v).collect(),
                    Unary::AddScalar(_) => g.data().to_vec(),
                };
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Gelu { x, cdf } => {
                let xv = self.value(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(cdf)
                    .map(|((gk, &v), c)| gk * (c + v * normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, len, inner) = axis_layout(&shape, *axis);
                let c = if matches!(op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = c * g.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Broadcast { x, axis } => {
                let (outer, len, inner) = axis_layout(g.shape(), *axis);
                let mut dx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[o * inner + i] += g.data()[(o * len + l) * inner + i];
                        }
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose()?);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let w = g.dims2()?.1;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![rows, w], dp)?);
                    }
                    offset += w;
                }
            }
            Op::AddRow { x, row } => {
                if self.nodes[row.0].requires_grad {
                    let c = self.value(*row).numel();
                    let mut db = vec![0.0; c];
                    for r in g.data().chunks(c) {
                        db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, *row, Tensor::vector(db));
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, g.clone());
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_layout(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let rows = inv_std.len();
                let gd = g.data();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        dgain[j] += gd[k] * xhat[k];
                        dbias[j] += gd[k];
                        let dh = gd[k] * gv.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = gd[k] * gv.data()[j];
                        dx[k] = scale * (d as f64 * dh - sum_dh - xhat[k] * sum_dh_h);
                    }
                }
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
                self.accumulate(grads, *gain, Tensor::vector(dgain));
                self.accumulate(grads, *bias, Tensor::vector(dbias));
            }
            Op::CrossEntropy { logits, label } => {
                let z = self.value(*logits);
                let lse = log_sum_exp(z.data());
                let gk = g.data()[0];
                let dz = z
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| gk * ((v - lse).exp() - if k == *label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), dz)?);
            }
        }
        Ok(())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log_sum_exp(z) − z[label]` as `(m − z_y) + ln1p(Σ_{j≠k} e^{z_j − m})`,
/// `k` the first argmax, so confident predictions keep full precision.
fn nll(z: &[f64], label: usize) -> f64 {
    let mut k = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[k] {
            k = i;
        }
    }
    let m = z[k];
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - z[label]) + rest.ln_1p()
}

#[cfg(test)]
mod tests;
