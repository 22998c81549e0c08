//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as an
//! append-only list of nodes. Operands always precede the node that uses
//! them, so [`Graph::backward`] is a single reverse sweep over the list.
//! Build a fresh graph per forward pass and drop it after the backward.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    AddBroadcast(Var, Var),
    Tanh(Var),
    Ln(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by the leaf they belong to.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are produced for it iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient (inputs, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "subtract")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "multiply")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.needs(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Matrix product, batched over identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_kernel(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape(format!("transpose of rank-{rank} tensor")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank || std::mem::replace(&mut seen[ax], true) {
                return Err(Error::Shape(format!("bad permutation {axes:?} for rank {rank}")));
            }
        }
        if axes.len() != rank {
            return Err(Error::Shape(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let v = tensor::permute_kernel(self.value(a), axes);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?.with_requires_grad(false);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree. The same
    /// var may appear more than once.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("concat of {base:?} and {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = tensor::split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::from_raw(shape, data),
            Op::Concat { parts: parts.to_vec(), axis },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = tensor::split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::from_raw(out_shape, data), Op::Slice { src: a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.needs(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape
    /// (bias rows, position embeddings).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::Shape(format!("cannot broadcast {bs:?} onto {xs:?}")));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(bias.len()) {
            for (v, &c) in chunk.iter_mut().zip(bias) {
                *v += c;
            }
        }
        let v = Tensor::from_raw(xs.to_vec(), data);
        let rg = self.needs(&[x, b]);
        Ok(self.push(v, Op::AddBroadcast(x, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::NonFinite(format!("ln of non-positive value {bad}")));
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Ln(a), rg))
    }

    /// Softmax over the last dimension of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_kernel(self.value(a));
        let rg = self.needs(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.needs(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Normalizes over the last dimension using the population variance,
    /// then applies the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {shape:?} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in src.chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * g[k] + b[k]);
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_raw(shape.clone(), out),
            Op::LayerNorm { x, gamma, beta, xhat: Tensor::from_raw(shape, xhat), inv_std },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy of logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = tensor::softmax_kernel(self.value(logits));
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in z.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse sweep from a one-element `loss`. Returns the gradient of
    /// every leaf with `requires_grad` that the loss depends on; leaves the
    /// loss does not reach get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let mut grads = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = adj[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(Var(id), g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut adj[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    self.accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    self.accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n) =
                    tensor::matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
                if rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        tensor::gemm_nt(
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(adj, *a, Tensor::from_raw(av.shape().to_vec(), da));
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        tensor::gemm_tn(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(adj, *b, Tensor::from_raw(bv.shape().to_vec(), db));
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.accumulate(adj, *a, tensor::permute_kernel(g, &inverse));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(adj, *a, Tensor::from_raw(shape, g.data().to_vec()));
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = tensor::split_at_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if rg(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(adj, p, Tensor::from_raw(val(p).shape().to_vec(), data));
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let src_shape = val(*src).shape().to_vec();
                let (outer, n, inner) = tensor::split_at_axis(&src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut data = vec![0.0; numel(&src_shape)];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(adj, *src, Tensor::from_raw(src_shape, data));
            }
            Op::Sum(a) => {
                self.accumulate(adj, *a, Tensor::full(val(*a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(adj, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::AddBroadcast(x, b) => {
                self.accumulate(adj, *x, g.clone());
                if rg(*b) {
                    let bshape = val(*b).shape().to_vec();
                    let mut db = vec![0.0; numel(&bshape)];
                    for chunk in g.data().chunks(db.len()) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(adj, *b, Tensor::from_raw(bshape, db));
                }
            }
            Op::Tanh(a) => {
                self.accumulate(adj, *a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y)));
            }
            Op::Ln(a) => self.accumulate(adj, *a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                self.accumulate(adj, *a, Tensor::from_raw(y.shape().to_vec(), dx));
            }
            Op::Gelu(a) => {
                self.accumulate(adj, *a, g.zip_map(val(*a), |g, x| g * gelu_derivative(x)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *xhat.shape().last().expect("rank >= 1");
                let gam = val(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for k in 0..d {
                            dg[k] += gr[k] * hr[k];
                            db[k] += gr[k];
                        }
                    }
                    self.accumulate(adj, *gamma, Tensor::from_raw(vec![d], dg));
                    self.accumulate(adj, *beta, Tensor::from_raw(vec![d], db));
                }
                if rg(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    let rows = g.data().chunks(d).zip(xhat.data().chunks(d)).zip(inv_std);
                    for ((gr, hr), &inv) in rows {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, c)| g * c).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv / d as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(dh, h)| scale * (d as f64 * dh - sum_dh - h * sum_dh_h)),
                        );
                    }
                    self.accumulate(adj, *x, Tensor::from_raw(xhat.shape().to_vec(), dx));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(adj, *logits, Tensor::from_raw(probs.shape().to_vec(), d));
            }
        }
    }
}

/// Central-difference gradient of `f` at `p`:
/// `(f(p + step·eᵢ) − f(p − step·eᵢ)) / (2·step)` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, p: &Tensor, step: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let indices: Vec<usize> = (0..p.len()).collect();
    let values = finite_diff_at(&mut f, p, step, &indices);
    Tensor::from_raw(p.shape().to_vec(), values)
}

/// Central differences at a subset of flat indices.
pub fn finite_diff_at<F>(mut f: F, p: &Tensor, step: f64, indices: &[usize]) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = p.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = p.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
