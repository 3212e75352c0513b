//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A [`Tape`] records every forward operation of one training step in
//! execution order. Operations only ever reference earlier nodes, so the
//! record is already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep that visits each node exactly once. Values created with
//! [`Tape::constant`] (e.g. detached posteriors) never receive or propagate
//! gradient.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    Sigmoid { x: Var },
    LogSigmoid { x: Var },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    BatchNormCols { x: Var, denom: Vec<f64>, floored: Vec<bool> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Reshape { x: Var },
    Pick { x: Var, index: usize },
    ChannelMean { x: Var, sample: usize, channel: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations for one forward/backward cycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a gradient-tracked leaf (parameter or optimized input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant: it neither receives nor propagates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Constant copy of an existing node's value (gradient stop).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` when no gradient
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- recorded operations ------------------------------------------------

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Dense { x, w, b }, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b }, needs))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (value, argmax) = ops::maxpool2d_forward(self.value(x), window)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = ops::log_sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::LogSigmoid { x }, needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_rows(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, needs))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = ops::log_softmax_rows(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::LogSoftmaxRows { x }, needs))
    }

    /// Train-mode column normalization. Returns the normalized node plus the
    /// batch mean and (floored) standard deviation for running-stat updates.
    pub fn batch_norm_cols(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let norm = ops::batchnorm_cols(self.value(x), eps)?;
        let floored: Vec<bool> = norm.std.iter().map(|&s| s < eps).collect();
        let mean = norm.mean;
        let denom = norm.denom.clone();
        let needs = self.needs(x);
        let var =
            self.push(norm.output, Op::BatchNormCols { x, denom: norm.denom, floored }, needs);
        Ok((var, mean, denom))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add: operand shapes differ"));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul: operand shapes differ"));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Single element by flat index, as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        if index >= self.value(x).len() {
            return Err(Error::shape(format!(
                "pick: index {index} out of range for {} elements",
                self.value(x).len()
            )));
        }
        let value = Tensor::scalar(self.value(x).data()[index]);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Pick { x, index }, needs))
    }

    /// Mean of one channel plane of a `n×c×h×w` node, as a scalar node.
    pub fn channel_mean(&mut self, x: Var, sample: usize, channel: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 {
            return Err(Error::shape("channel_mean: expected 4-d input"));
        }
        if sample >= t.dim(0) || channel >= t.dim(1) {
            return Err(Error::shape(format!(
                "channel_mean: sample {sample}/channel {channel} out of range for {:?}",
                t.shape()
            )));
        }
        let plane = t.dim(2) * t.dim(3);
        let base = (sample * t.dim(1) + channel) * plane;
        let mean = t.data()[base..base + plane].iter().sum::<f64>() / plane as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(mean), Op::ChannelMean { x, sample, channel }, needs))
    }

    // -- reverse sweep -------------------------------------------------------

    /// Populates gradients of every gradient-tracked node reachable from
    /// `loss`, which must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward: unknown loss node".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&mut self, i: usize, g: &Tensor) {
        // Ops only reference earlier nodes, so reads below never alias the
        // grad slot being written.
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (dx, dw, db) = ops::dense_backward(self.value(x), self.value(w), g);
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (dx, dw, db) = ops::conv2d_backward(self.value(x), self.value(w), g);
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                let dx = ops::maxpool2d_backward(self.value(x).shape(), argmax, g);
                self.accum(x, dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    self.value(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )
                .expect("relu dx shape");
                self.accum(x, dx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = &self.nodes[i].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    y.data().iter().zip(g.data()).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect(),
                )
                .expect("sigmoid dx shape");
                self.accum(x, dx);
            }
            Op::LogSigmoid { x } => {
                let x = *x;
                // d/dx log σ(x) = σ(−x)
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    self.value(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * ops::sigmoid_scalar(-xv))
                        .collect(),
                )
                .expect("log_sigmoid dx shape");
                self.accum(x, dx);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let y = &self.nodes[i].value;
                let k = y.dim(1);
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in
                    dx.chunks_mut(k).zip(y.data().chunks(k)).zip(g.data().chunks(k))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                let dx = Tensor::new(y.shape().to_vec(), dx).expect("softmax dx shape");
                self.accum(x, dx);
            }
            Op::LogSoftmaxRows { x } => {
                let x = *x;
                let y = &self.nodes[i].value;
                let k = y.dim(1);
                let mut dx = vec![0.0; y.len()];
                for ((drow, yrow), grow) in
                    dx.chunks_mut(k).zip(y.data().chunks(k)).zip(g.data().chunks(k))
                {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                let dx = Tensor::new(y.shape().to_vec(), dx).expect("log_softmax dx shape");
                self.accum(x, dx);
            }
            Op::BatchNormCols { x, denom, floored } => {
                let x = *x;
                let dx = ops::batchnorm_cols_backward(&self.nodes[i].value, denom, floored, g);
                self.accum(x, dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    self.value(b).data().iter().zip(g.data()).map(|(&bv, &gv)| bv * gv).collect(),
                )
                .expect("mul da shape");
                let db = Tensor::new(
                    g.shape().to_vec(),
                    self.value(a).data().iter().zip(g.data()).map(|(&av, &gv)| av * gv).collect(),
                )
                .expect("mul db shape");
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx = g.map(|v| v * c);
                self.accum(x, dx);
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = Tensor::full(self.value(x).shape(), g.data()[0]);
                self.accum(x, dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let dx = Tensor::new(shape, g.data().to_vec()).expect("reshape dx shape");
                self.accum(x, dx);
            }
            Op::Pick { x, index } => {
                let (x, index) = (*x, *index);
                let mut dx = Tensor::zeros(self.value(x).shape());
                dx.data_mut()[index] = g.data()[0];
                self.accum(x, dx);
            }
            Op::ChannelMean { x, sample, channel } => {
                let (x, sample, channel) = (*x, *sample, *channel);
                let t = self.value(x);
                let plane = t.dim(2) * t.dim(3);
                let base = (sample * t.dim(1) + channel) * plane;
                let mut dx = Tensor::zeros(t.shape());
                let gv = g.data()[0] / plane as f64;
                for v in &mut dx.data_mut()[base..base + plane] {
                    *v = gv;
                }
                self.accum(x, dx);
            }
        }
    }
}
