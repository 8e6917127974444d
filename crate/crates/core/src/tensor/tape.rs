//! The recording tape. Every differentiable operation appends a node; the
//! backward pass replays the node list in reverse, so each node is visited
//! exactly once. A tape is confined to one logical thread; independent
//! tapes share nothing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, expand_to, reduce_to_shape, strides_of, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Gradients of the loss with respect to every `requires_grad` leaf.
pub type GradMap = BTreeMap<Var, Vec<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Tanh { a: usize },
    Softmax { a: usize, axis: usize },
    MaskedSoftmax { a: usize, axis: usize, mask: Vec<bool> },
    Gather { a: usize, axis: usize, indices: Vec<usize> },
    StackLast { parts: Vec<usize> },
    Reshape { a: usize },
    SwapLast2 { a: usize },
    SumAll { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAll { a: usize },
    NormalizeAll { a: usize, norm: f64 },
    LogSumExpAll { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a leaf after `backward`, if one was produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool, what: &'static str) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, op, needs))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Forward ops ────────────────────────────────────────────────────

    /// Matrix product over the trailing two axes, broadcast over leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = {
            let ta = self.value(a);
            let tb = self.value(b);
            batched_matmul(ta.data(), ta.shape(), tb.data(), tb.shape())?
        };
        let needs = self.needs(a) || self.needs(b);
        self.out(shape, data, Op::MatMul { a: a.0, b: b.0 }, needs, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (shape, data) = {
            let ta = self.value(a);
            let tb = self.value(b);
            let shape = broadcast_shapes(ta.shape(), tb.shape())?;
            let ea = expand_to(ta.data(), ta.shape(), &shape);
            let eb = expand_to(tb.data(), tb.shape(), &shape);
            let data: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| f(*x, *y)).collect();
            (shape, data)
        };
        let needs = self.needs(a) || self.needs(b);
        self.out(shape, data, op(a.0, b.0), needs, what)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.out(shape, data, Op::Scale { a: a.0, c }, needs, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        let data: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.out(shape, data, Op::Tanh { a: a.0 }, needs, "tanh")
    }

    /// Max-subtracted softmax along `axis`; each slice sums to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        check_axis(&shape, axis, "softmax")?;
        let data = softmax_lanes(ta.data(), &shape, axis, None);
        let needs = self.needs(a);
        self.out(shape, data, Op::Softmax { a: a.0, axis }, needs, "softmax")
    }

    /// Softmax along `axis` restricted to entries whose mask is `true`.
    /// Masked entries get weight exactly zero, as if their score were -inf;
    /// a fully masked slice comes out all-zero instead of NaN.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        check_axis(&shape, axis, "masked_softmax")?;
        if mask.len() != ta.numel() {
            return Err(Error::Dimension(format!(
                "mask length {} does not cover tensor of shape {:?}",
                mask.len(),
                shape
            )));
        }
        let data = softmax_lanes(ta.data(), &shape, axis, Some(mask));
        let needs = self.needs(a);
        self.out(
            shape,
            data,
            Op::MaskedSoftmax {
                a: a.0,
                axis,
                mask: mask.to_vec(),
            },
            needs,
            "masked_softmax",
        )
    }

    /// Output slice `j` along `axis` equals input slice `indices[j]`.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        check_axis(&shape, axis, "gather")?;
        let extent = shape[axis];
        if let Some(bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::Index(format!(
                "gather index {bad} into axis {axis} of extent {extent}"
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (j, &idx) in indices.iter().enumerate() {
                let src = (o * extent + idx) * inner;
                let dst = (o * indices.len() + j) * inner;
                data[dst..dst + inner].copy_from_slice(&ta.data()[src..src + inner]);
            }
        }
        let needs = self.needs(a);
        self.out(
            out_shape,
            data,
            Op::Gather {
                a: a.0,
                axis,
                indices: indices.to_vec(),
            },
            needs,
            "gather",
        )
    }

    /// Stacks same-shape tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_last of zero tensors".into()));
        }
        let base_shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != base_shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "stack_last mixes shapes {:?} and {:?}",
                    base_shape,
                    self.value(p).shape()
                )));
            }
        }
        let n = parts.len();
        let base_numel: usize = base_shape.iter().product();
        let mut data = vec![0.0; base_numel * n];
        for (i, &p) in parts.iter().enumerate() {
            for (j, &x) in self.value(p).data().iter().enumerate() {
                data[j * n + i] = x;
            }
        }
        let mut shape = base_shape;
        shape.push(n);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.out(
            shape,
            data,
            Op::StackLast {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
            "stack_last",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                ta.shape(),
                shape
            )));
        }
        let data = ta.data().to_vec();
        let needs = self.needs(a);
        self.out(shape.to_vec(), data, Op::Reshape { a: a.0 }, needs, "reshape")
    }

    /// Transposes the trailing two axes.
    pub fn swap_last2(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "swap_last2 wants rank >= 2, got {:?}",
                shape
            )));
        }
        let (data, out_shape) = swap_last2_data(ta.data(), &shape);
        let needs = self.needs(a);
        self.out(out_shape, data, Op::SwapLast2 { a: a.0 }, needs, "swap_last2")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.out(vec![], vec![s], Op::SumAll { a: a.0 }, needs, "sum_all")
    }

    /// Sums out one axis (rank drops by one).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        check_axis(&shape, axis, "sum_axis")?;
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += ta.data()[src + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs(a);
        self.out(out_shape, data, Op::SumAxis { a: a.0, axis }, needs, "sum_axis")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let needs = self.needs(a);
        self.out(vec![], vec![m], Op::MeanAll { a: a.0 }, needs, "mean_all")
    }

    /// Scales the whole tensor to unit Frobenius norm.
    pub fn normalize_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let norm = ta.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Domain("normalize of zero tensor".into()));
        }
        let shape = ta.shape().to_vec();
        let data: Vec<f64> = ta.data().iter().map(|x| x / norm).collect();
        let needs = self.needs(a);
        self.out(shape, data, Op::NormalizeAll { a: a.0, norm }, needs, "normalize_all")
    }

    /// log(sum(exp(x))) over all elements, max-subtracted.
    pub fn logsumexp_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::Domain("logsumexp of empty tensor".into()));
        }
        let max = ta.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = ta.data().iter().map(|x| (x - max).exp()).sum();
        let lse = max + s.ln();
        let needs = self.needs(a);
        self.out(vec![], vec![lse], Op::LogSumExpAll { a: a.0 }, needs, "logsumexp_all")
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Returns the gradient of the
    /// loss with respect to every `requires_grad` leaf and stores the same
    /// buffer on the leaf tensor itself.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    grads[i] = Some(grad);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (da, db) = {
                        let ta = &self.nodes[a].value;
                        let tb = &self.nodes[b].value;
                        matmul_backward(&grad, self.nodes[i].value.shape(), ta, tb)?
                    };
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                    accumulate(&mut grads, b, db, self.nodes[b].needs_grad);
                }
                Op::Add { a, b } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let da = reduce_to_shape(&grad, &out_shape, self.nodes[a].value.shape());
                    let db = reduce_to_shape(&grad, &out_shape, self.nodes[b].value.shape());
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                    accumulate(&mut grads, b, db, self.nodes[b].needs_grad);
                }
                Op::Sub { a, b } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let da = reduce_to_shape(&grad, &out_shape, self.nodes[a].value.shape());
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    let db = reduce_to_shape(&neg, &out_shape, self.nodes[b].value.shape());
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                    accumulate(&mut grads, b, db, self.nodes[b].needs_grad);
                }
                Op::Mul { a, b } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let ea = expand_to(self.nodes[a].value.data(), self.nodes[a].value.shape(), &out_shape);
                    let eb = expand_to(self.nodes[b].value.data(), self.nodes[b].value.shape(), &out_shape);
                    let da_full: Vec<f64> = grad.iter().zip(&eb).map(|(g, y)| g * y).collect();
                    let db_full: Vec<f64> = grad.iter().zip(&ea).map(|(g, x)| g * x).collect();
                    let da = reduce_to_shape(&da_full, &out_shape, self.nodes[a].value.shape());
                    let db = reduce_to_shape(&db_full, &out_shape, self.nodes[b].value.shape());
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                    accumulate(&mut grads, b, db, self.nodes[b].needs_grad);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::Tanh { a } => {
                    let y = self.nodes[i].value.data();
                    let da: Vec<f64> = grad.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::Softmax { a, axis } => {
                    let da = softmax_backward(&grad, self.nodes[i].value.data(), self.nodes[i].value.shape(), axis, None);
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::MaskedSoftmax { a, axis, mask } => {
                    let da = softmax_backward(&grad, self.nodes[i].value.data(), self.nodes[i].value.shape(), axis, Some(&mask));
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::Gather { a, axis, indices } => {
                    // Scatter-add: the transpose of gather.
                    let in_shape = self.nodes[a].value.shape();
                    let outer: usize = in_shape[..axis].iter().product();
                    let extent = in_shape[axis];
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let mut da = vec![0.0; self.nodes[a].value.numel()];
                    for o in 0..outer {
                        for (j, &idx) in indices.iter().enumerate() {
                            let src = (o * indices.len() + j) * inner;
                            let dst = (o * extent + idx) * inner;
                            for k in 0..inner {
                                da[dst + k] += grad[src + k];
                            }
                        }
                    }
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::StackLast { parts } => {
                    let n_parts = parts.len();
                    for (pi, &p) in parts.iter().enumerate() {
                        if !self.nodes[p].needs_grad {
                            continue;
                        }
                        let base_numel = self.nodes[p].value.numel();
                        let mut dp = vec![0.0; base_numel];
                        for (j, slot) in dp.iter_mut().enumerate() {
                            *slot = grad[j * n_parts + pi];
                        }
                        accumulate(&mut grads, p, dp, true);
                    }
                }
                Op::Reshape { a } => {
                    accumulate(&mut grads, a, grad.clone(), self.nodes[a].needs_grad);
                }
                Op::SwapLast2 { a } => {
                    let out_shape = self.nodes[i].value.shape();
                    let (da, _) = swap_last2_data(&grad, out_shape);
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::SumAll { a } => {
                    let g = grad[0];
                    let da = vec![g; self.nodes[a].value.numel()];
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::SumAxis { a, axis } => {
                    let in_shape = self.nodes[a].value.shape();
                    let outer: usize = in_shape[..axis].iter().product();
                    let extent = in_shape[axis];
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let mut da = vec![0.0; self.nodes[a].value.numel()];
                    for o in 0..outer {
                        for e in 0..extent {
                            let dst = (o * extent + e) * inner;
                            for k in 0..inner {
                                da[dst + k] = grad[o * inner + k];
                            }
                        }
                    }
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::MeanAll { a } => {
                    let numel = self.nodes[a].value.numel();
                    let g = grad[0] / numel as f64;
                    accumulate(&mut grads, a, vec![g; numel], self.nodes[a].needs_grad);
                }
                Op::NormalizeAll { a, norm } => {
                    let y = self.nodes[i].value.data();
                    let dot: f64 = grad.iter().zip(y).map(|(g, v)| g * v).sum();
                    let da: Vec<f64> = grad.iter().zip(y).map(|(g, v)| (g - dot * v) / norm).collect();
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
                Op::LogSumExpAll { a } => {
                    let x = self.nodes[a].value.data();
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = x.iter().map(|v| (v - max).exp()).sum();
                    let g = grad[0];
                    let da: Vec<f64> = x.iter().map(|v| g * (v - max).exp() / denom).collect();
                    accumulate(&mut grads, a, da, self.nodes[a].needs_grad);
                }
            }
        }

        let mut map = GradMap::new();
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g.clone());
                map.insert(Var(idx), g);
            }
        }
        Ok(map)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, delta: Vec<f64>, needed: bool) {
    if !needed {
        return;
    }
    match &mut grads[target] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn check_axis(shape: &[usize], axis: usize, what: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "{what}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    if shape[axis] == 0 {
        return Err(Error::Domain(format!("{what}: empty axis {axis}")));
    }
    Ok(())
}

fn swap_last2_data(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let ndim = shape.len();
    let (r, c) = (shape[ndim - 2], shape[ndim - 1]);
    let batch: usize = shape[..ndim - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ndim - 2, ndim - 1);
    (out, out_shape)
}

fn softmax_lanes(data: &[f64], shape: &[usize], axis: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |e: usize| (o * extent + e) * inner + k;
            let active = |e: usize| mask.is_none_or(|m| m[at(e)]);
            let mut max = f64::NEG_INFINITY;
            for e in 0..extent {
                if active(e) {
                    max = max.max(data[at(e)]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked lane stays all-zero
            }
            let mut denom = 0.0;
            for e in 0..extent {
                if active(e) {
                    let v = (data[at(e)] - max).exp();
                    out[at(e)] = v;
                    denom += v;
                }
            }
            for e in 0..extent {
                if active(e) {
                    out[at(e)] /= denom;
                }
            }
        }
    }
    out
}

fn softmax_backward(
    grad: &[f64],
    y: &[f64],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut da = vec![0.0; grad.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |e: usize| (o * extent + e) * inner + k;
            let active = |e: usize| mask.is_none_or(|m| m[at(e)]);
            let mut dot = 0.0;
            for e in 0..extent {
                if active(e) {
                    dot += grad[at(e)] * y[at(e)];
                }
            }
            for e in 0..extent {
                if active(e) {
                    da[at(e)] = y[at(e)] * (grad[at(e)] - dot);
                }
            }
        }
    }
    da
}

/// Matmul over trailing axes with broadcasting over leading axes.
fn batched_matmul(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> Result<(Vec<f64>, Vec<usize>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "matmul wants rank >= 2 operands, got {a_shape:?} and {b_shape:?}"
        )));
    }
    let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {a_shape:?} x {b_shape:?}"
        )));
    }
    let lead_a = &a_shape[..a_shape.len() - 2];
    let lead_b = &b_shape[..b_shape.len() - 2];
    let lead = broadcast_shapes(lead_a, lead_b)?;
    let batch: usize = lead.iter().product();

    let map_a = lead_offset_map(&lead, lead_a);
    let map_b = lead_offset_map(&lead, lead_b);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = map_a(bi) * m * ka;
        let bb = map_b(bi) * ka * n;
        let ob = bi * m * n;
        for i in 0..m {
            let arow = ab + i * ka;
            let orow = ob + i * n;
            for p in 0..ka {
                let av = a[arow + p];
                if av == 0.0 {
                    continue;
                }
                let brow = bb + p * n;
                for j in 0..n {
                    out[orow + j] += av * b[brow + j];
                }
            }
        }
    }
    let mut shape = lead;
    shape.push(m);
    shape.push(n);
    Ok((out, shape))
}

/// Maps a linear index over the broadcast leading shape to the linear
/// batch index of an operand's own leading shape.
fn lead_offset_map(lead: &[usize], own: &[usize]) -> impl Fn(usize) -> usize {
    let ndim = lead.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - own.len()..].copy_from_slice(own);
    let own_strides = strides_of(&padded);
    let lead = lead.to_vec();
    move |flat: usize| {
        let mut rem = flat;
        let mut off = 0usize;
        for d in (0..ndim).rev() {
            let c = rem % lead[d];
            rem /= lead[d];
            if padded[d] != 1 {
                off += c * own_strides[d];
            }
        }
        off
    }
}

fn matmul_backward(
    grad: &[f64],
    out_shape: &[usize],
    ta: &Tensor,
    tb: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    // dA = dC . B^T, dB = A^T . dC, each reduced over broadcast batch axes.
    let (bt, bt_shape) = swap_last2_data(tb.data(), tb.shape());
    let (da_full, da_shape) = batched_matmul(grad, out_shape, &bt, &bt_shape)?;
    let da = reduce_to_shape(&da_full, &da_shape, ta.shape());

    let (at, at_shape) = swap_last2_data(ta.data(), ta.shape());
    let (db_full, db_shape) = batched_matmul(&at, &at_shape, grad, out_shape)?;
    let db = reduce_to_shape(&db_full, &db_shape, tb.shape());
    Ok((da, db))
}
