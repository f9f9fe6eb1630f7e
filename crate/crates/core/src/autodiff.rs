//! Tape-based reverse-mode differentiation.
//!
//! A [`GradientContext`] records one forward pass as an append-only list of
//! nodes. Nodes only reference earlier nodes, so walking the list backwards
//! is a reverse topological order and every node is visited once.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded in a [`GradientContext`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How per-sample cross-entropy terms are combined into the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Per-sample gradients do not depend on the batch size.
    Sum,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { x: Var, kernel: Var, geometry: ConvGeometry },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    Sum(Var),
    HalfSquaredNorm(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
        reduction: Reduction,
    },
}

struct Node<'a, F: Real> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct GradientContext<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    consumed: bool,
}

impl<F: Real> Default for GradientContext<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves.
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
    visited: usize,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of recorded operations whose gradient rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<'a, F: Real> GradientContext<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<F>>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Borrows a tensor whose gradient is wanted.
    pub fn input(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn input_owned(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrows a tensor that is not differentiated.
    pub fn constant(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor<F>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_channel_bias(self.value(bias))?;
        Ok(self.derived(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = tensor::conv_geometry(
            self.value(x).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let out = self.value(x).conv2d(self.value(kernel), stride, padding)?;
        Ok(self.derived(out, Op::Conv2d { x, kernel, geometry }, &[x, kernel]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (planes, h, w) = tensor::pool_dims(xv.shape())?;
        let (out, argmax) = kernels::maxpool2x2_forward(xv.data(), planes, h, w);
        let mut shape = xv.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] = h / 2;
        shape[nd - 1] = w / 2;
        let out = Tensor::from_parts(shape, out);
        Ok(self.derived(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).scale(s)?;
        Ok(self.derived(out, Op::Scale(x, s), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let out = Tensor::from_checked(vec![1], vec![s], "sum")?;
        Ok(self.derived(out, Op::Sum(x), &[x]))
    }

    /// `½‖x‖²`.
    pub fn half_squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &v| a + v * v);
        let out = Tensor::from_checked(vec![1], vec![s * F::of(0.5)], "half_squared_norm")?;
        Ok(self.derived(out, Op::HalfSquaredNorm(x), &[x]))
    }

    /// Softmax cross entropy of `[N, C]` logits against class indices,
    /// stabilised by subtracting each row's maximum.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let z = self.value(logits);
        let (loss, probs) = softmax_xent_forward(z, labels, reduction)?;
        let out = Tensor::from_checked(vec![1], vec![loss], "softmax_cross_entropy")?;
        Ok(self.derived(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            &[logits],
        ))
    }

    /// Runs the backward pass from a scalar `loss`. A context supports one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::LossNotScalar(loss_shape));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::ones(loss_shape));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(idx, &g, &mut grads)?;
        }

        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = tensor::matmul_dims(av.shape(), bv.shape())?;
                if self.wants(*a) {
                    let da = kernels::matmul_a_bt(g.data(), bv.data(), m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let db = kernels::matmul_at_b(av.data(), g.data(), m, k, n);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let d = self.value(*b).len();
                    let mut db = vec![F::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![d], db));
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*b) {
                    let shape = self.value(*x).shape();
                    let (c, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![F::zero(); c];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        let s = chunk.iter().fold(F::zero(), |a, &v| a + v);
                        db[i % c] = db[i % c] + s;
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![c], db));
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::Conv2d {
                x,
                kernel,
                geometry,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    geometry,
                    self.wants(*x),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if let Some(dk) = dk {
                    accumulate(
                        grads,
                        *kernel,
                        Tensor::from_parts(self.value(*kernel).shape().to_vec(), dk),
                    );
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![F::zero(); xv.len()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx[src] = dx[src] + d;
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::HalfSquaredNorm(x) => {
                let gs = g.item();
                accumulate(grads, *x, self.value(*x).map(|v| v * gs));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let classes = shape[1];
                let scale = match reduction {
                    Reduction::Mean => g.item() / F::of(labels.len() as f64),
                    Reduction::Sum => g.item(),
                };
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(classes).zip(labels) {
                    row[y] = row[y] - F::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(shape, d));
            }
        }
        Ok(())
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Returns the reduced loss and the row-wise softmax probabilities.
pub(crate) fn softmax_xent_forward<F: Real>(
    logits: &Tensor<F>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(F, Vec<F>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = shape[1];
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = F::zero();
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut s = F::zero();
        for &z in row {
            s = s + (z - m).exp();
        }
        total = total + (s.ln() - (row[y] - m));
        for &z in row {
            probs.push((z - m).exp() / s);
        }
    }
    let loss = match reduction {
        Reduction::Mean => total / F::of(labels.len() as f64),
        Reduction::Sum => total,
    };
    Ok((loss, probs))
}

/// Mean softmax cross entropy without recording a graph.
pub fn softmax_cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    Ok(softmax_xent_forward(logits, labels, Reduction::Mean)?.0)
}
