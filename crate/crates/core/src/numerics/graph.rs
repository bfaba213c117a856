//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is applied, so node ids are a
//! topological order by construction. [`Graph::backward`] walks the tape in
//! reverse from a scalar loss and accumulates gradients for every node that
//! depends on a parameter leaf.
//!
//! Binary operations accept a right operand that is either the same shape as
//! the left one, a row vector (`[n]` or `[1, n]`) broadcast over rows, a column
//! (`[m, 1]`) broadcast over columns, or a single-element tensor.

use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Scale(NodeId, T),
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm(NodeId),
    Embedding(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    SquaredError(NodeId, NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu_tanh",
            Op::LayerNorm(_) => "layer_norm",
            Op::Embedding(..) => "embedding",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SquaredError(..) => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b, _)
            | Op::Sub(a, b, _)
            | Op::Mul(a, b, _)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Embedding(t, _) => vec![*t],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::LayerNorm(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    /// Per-row reciprocal standard deviations for layer normalization.
    aux: Option<Vec<T>>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Operation name and input ids of a node.
    pub fn node(&self, id: NodeId) -> (&'static str, Vec<NodeId>) {
        let op = &self.nodes[id.0].op;
        (op.name(), op.inputs())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, aux: Option<Vec<T>>) -> NodeId {
        let needs_grad = match &op {
            Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value: Arc::new(value), aux, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value, None)
    }

    /// Parameter leaf with index `pid`; gradients are reported per `pid`.
    pub fn param(&mut self, value: Arc<Tensor<T>>, pid: usize) -> NodeId {
        self.nodes.push(Node { op: Op::Param(pid), value, aux: None, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, None))
    }

    fn broadcast_kind(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::Same);
        }
        let (m, n) = a.dims2();
        if b.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let b_is_row = b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1);
        if a.rank() == 2 && b_is_row && b.len() == n {
            return Ok(Broadcast::Row);
        }
        if a.rank() == 2 && b.rank() == 2 && b.shape() == [m, 1] {
            return Ok(Broadcast::Col);
        }
        Err(Error::shape(format!(
            "cannot broadcast {:?} against {:?}",
            b.shape(),
            a.shape()
        )))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(NodeId, NodeId, Broadcast) -> Op<T>,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = Self::broadcast_kind(av, bv)?;
        let n = av.cols();
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let y = match kind {
                    Broadcast::Same => bd[k],
                    Broadcast::Row => bd[k % n],
                    Broadcast::Col => bd[k / n],
                    Broadcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(make(a, b, kind), out, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), out, None)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu_tanh);
        self.push(Op::Gelu(a), out, None)
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let nf = T::of(n as f64);
        let mut out = Vec::with_capacity(m * n);
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row_slice(i);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            out.extend(row.iter().map(|&v| (v - mu) * r));
            inv.push(r);
        }
        let out = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(Op::LayerNorm(a), out, Some(inv))
    }

    /// Gathers rows `indices` of a `[vocab, width]` table.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let vocab = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(format!("embedding index {bad} outside vocabulary {vocab}")));
        }
        if indices.is_empty() {
            return Err(Error::shape("embedding lookup with no indices"));
        }
        let out = t.select_rows(indices);
        Ok(self.push(Op::Embedding(table, indices.to_vec()), out, None))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let m = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != m) {
            return Err(Error::shape(format!(
                "concat row mismatch: {} vs {m}",
                self.value(*p).rows()
            )));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out, None))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), out, None)
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| (x - y) * (x - y))?;
        Ok(self.push(Op::SquaredError(a, b), out, None))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }

        let mut params = Vec::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(pid) = node.op {
                params.push((pid, NodeId(id)));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], to: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[to.0].needs_grad {
            return Ok(());
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn reduce_broadcast(dy: &Tensor<T>, target: &Tensor<T>, kind: Broadcast) -> Tensor<T> {
        let (m, n) = dy.dims2();
        match kind {
            Broadcast::Same => dy.clone(),
            Broadcast::Scalar => Tensor::full(target.shape(), dy.sum()),
            Broadcast::Row => {
                let mut acc = vec![T::zero(); n];
                for i in 0..m {
                    for (a, &d) in acc.iter_mut().zip(dy.row_slice(i)) {
                        *a += d;
                    }
                }
                Tensor::new(target.shape().to_vec(), acc).expect("row shape")
            }
            Broadcast::Col => {
                let acc = (0..m).map(|i| dy.row_slice(i).iter().copied().sum()).collect();
                Tensor::new(target.shape().to_vec(), acc).expect("column shape")
            }
        }
    }

    fn expand(b: &Tensor<T>, like: &Tensor<T>, kind: Broadcast) -> Tensor<T> {
        let n = like.cols();
        let bd = b.data();
        let data = (0..like.len())
            .map(|k| match kind {
                Broadcast::Same => bd[k],
                Broadcast::Row => bd[k % n],
                Broadcast::Col => bd[k / n],
                Broadcast::Scalar => bd[0],
            })
            .collect();
        Tensor::new(like.shape().to_vec(), data).expect("expanded shape")
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |id: NodeId| -> &Tensor<T> { &self.nodes[id.0].value };
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let g = dy.matmul(&val(*b).transpose())?;
                    self.accumulate(grads, *a, g)?;
                }
                if needs(*b) {
                    let g = val(*a).transpose().matmul(dy)?;
                    self.accumulate(grads, *b, g)?;
                }
            }
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, dy.clone())?;
                if needs(*b) {
                    self.accumulate(grads, *b, Self::reduce_broadcast(dy, val(*b), *kind))?;
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, dy.clone())?;
                if needs(*b) {
                    let g = Self::reduce_broadcast(dy, val(*b), *kind).scale(-T::one());
                    self.accumulate(grads, *b, g)?;
                }
            }
            Op::Mul(a, b, kind) => {
                if needs(*a) {
                    let be = Self::expand(val(*b), val(*a), *kind);
                    self.accumulate(grads, *a, dy.mul(&be)?)?;
                }
                if needs(*b) {
                    let prod = dy.mul(val(*a))?;
                    self.accumulate(grads, *b, Self::reduce_broadcast(&prod, val(*b), *kind))?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, dy.scale(*c))?,
            Op::Relu(a) => {
                let g = dy.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() })?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Gelu(a) => {
                let g = dy.zip_map(val(*a), |d, x| d * gelu_tanh_grad(x))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::LayerNorm(a) => {
                let y = &node.value;
                let inv = node.aux.as_ref().expect("layer norm keeps its scales");
                let (m, n) = y.dims2();
                let nf = T::of(n as f64);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let dyr = dy.row_slice(i);
                    let yr = y.row_slice(i);
                    let mean_dy = dyr.iter().copied().sum::<T>() / nf;
                    let mean_dyy = dyr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / nf;
                    out.extend(
                        dyr.iter()
                            .zip(yr)
                            .map(|(&d, &v)| inv[i] * (d - mean_dy - v * mean_dyy)),
                    );
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?)?;
            }
            Op::Embedding(table, indices) => {
                let tv = val(*table);
                let mut g = Tensor::zeros(tv.shape());
                for (r, &idx) in indices.iter().enumerate() {
                    for (acc, &d) in g.row_slice_mut(idx).iter_mut().zip(dy.row_slice(r)) {
                        *acc += d;
                    }
                }
                self.accumulate(grads, *table, g)?;
            }
            Op::Concat(parts) => {
                let m = dy.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if needs(*p) {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&dy.row_slice(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(val(*p).shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), dy.data()[0]))?;
            }
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), dy.data()[0] / n))?;
            }
            Op::SquaredError(a, b) => {
                let two = T::of(2.0);
                let d = val(*a).zip_map(val(*b), |x, y| two * (x - y))?.mul(dy)?;
                if needs(*b) {
                    self.accumulate(grads, *b, d.scale(-T::one()))?;
                }
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `node`, if the node influences it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter index, zero-filled for parameters the loss
    /// never touched. `shapes[pid]` is the shape of parameter `pid`.
    pub fn for_params(&self, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for &(pid, node) in &self.params {
            if let Some(g) = self.wrt(node) {
                out[pid].add_assign(g).expect("parameter gradient matches parameter shape");
            }
        }
        out
    }
}
