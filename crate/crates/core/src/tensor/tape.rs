//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every op of one forward pass. [`Graph::backward`] walks
//! the record in reverse and returns the gradients of every node that depends
//! on a leaf created with [`Graph::param`]. Dropping the graph frees the tape.

use super::kernels::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    maxpool2x2_backward, maxpool2x2_forward,
};
use super::{fmt_dims, Tensor4};
use crate::error::{Result, WbError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, stride: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Concat { parts: Vec<Var> },
    L1 { pred: Var, target: Var, reduction: Reduction },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
    // f64 copy of single-element reductions, kept to avoid f32 rounding
    exact: Option<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        let exact = (value.len() == 1).then(|| value.data()[0] as f64);
        self.nodes.push(Node { value, op, requires_grad, exact });
        Var(self.nodes.len() - 1)
    }

    fn set_exact(&mut self, v: Var, x: f64) {
        self.nodes[v.0].exact = Some(x);
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node. Losses and their sums carry an f64
    /// accumulator, which is returned instead of the rounded f32.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].exact
    }

    /// Bias leaves are stored as `1x1x1xC` tensors.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias).data(), stride, pad)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, stride, pad }, rg))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = conv_transpose2d_forward(self.value(input), self.value(weight), self.value(bias).data(), stride)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias, stride }, rg))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2x2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        // written so NaN passes through instead of being clamped away
        out.data_mut().iter_mut().for_each(|v| *v = if *v < 0.0 { 0.0 } else { *v });
        let rg = self.rg(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| WbError::Config("concat of nothing".into()))?).dims();
        let mut channels = 0;
        for &p in parts {
            let d = self.value(p).dims();
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(WbError::shape("concat_channels", fmt_dims(first), fmt_dims(d)));
            }
            channels += d[1];
        }
        let [n, _, h, w] = first;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.channels() * plane;
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let out = Tensor4::from_vec([n, channels, h, w], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// L1 loss as a `1x1x1x1` node: sum or mean of `|pred - target|`.
    pub fn l1_loss(&mut self, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.dims() != t.dims() {
            return Err(WbError::shape("l1_loss", fmt_dims(p.dims()), fmt_dims(t.dims())));
        }
        let mut total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        if reduction == Reduction::Mean && !p.is_empty() {
            total /= p.len() as f64;
        }
        let out = Tensor4::filled([1, 1, 1, 1], total as f32);
        let rg = self.rg(pred) || self.rg(target);
        let v = self.push(out, Op::L1 { pred, target, reduction }, rg);
        self.set_exact(v, total);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims() != y.dims() {
            return Err(WbError::shape("add", fmt_dims(x.dims()), fmt_dims(y.dims())));
        }
        let mut out = x.clone();
        out.data_mut().iter_mut().zip(y.data()).for_each(|(o, &v)| *o += v);
        let rg = self.rg(a) || self.rg(b);
        let exact = self.scalar(a).zip(self.scalar(b)).map(|(x, y)| x + y);
        let v = self.push(out, Op::Add { a, b }, rg);
        if let Some(x) = exact {
            self.set_exact(v, x);
        }
        Ok(v)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(input);
        let exact = self.scalar(input).map(|x| x * factor as f64);
        let v = self.push(out, Op::Scale { input, factor }, rg);
        if let Some(x) = exact {
            self.set_exact(v, x);
        }
        v
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| WbError::Config("sum of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(WbError::shape("backward", "single-element loss", fmt_dims(seed.dims())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // only leaf gradients are kept; intermediates are freed as we go
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor4::from_vec(n.value.dims(), g).expect("gradient shape")))
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *pad,
                    g,
                    self.rg(*input),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                self.accumulate_if(grads, *weight, dw);
                self.accumulate_if(grads, *bias, db);
            }
            Op::ConvTranspose2d { input, weight, bias, stride } => {
                let (dx, dw, db) =
                    conv_transpose2d_backward(self.value(*input), self.value(*weight), *stride, g, self.rg(*input));
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                self.accumulate_if(grads, *weight, dw);
                self.accumulate_if(grads, *bias, db);
            }
            Op::MaxPool { input, argmax } => {
                if self.rg(*input) {
                    accumulate(grads, *input, maxpool2x2_backward(self.value(*input).len(), argmax, g));
                }
            }
            Op::Relu { input } => {
                if self.rg(*input) {
                    let x = self.value(*input).data();
                    let dx = x.iter().zip(g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                    accumulate(grads, *input, dx);
                }
            }
            Op::Concat { parts } => {
                let [n, _, h, w] = node.value.dims();
                let plane = h * w;
                let total = node.value.channels() * plane;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).channels() * plane;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * per);
                        for s in 0..n {
                            d.extend_from_slice(&g[s * total + offset..s * total + offset + per]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += per;
                }
            }
            Op::L1 { pred, target, reduction } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / p.len().max(1) as f32,
                };
                let sign = |a: f32, b: f32| {
                    if a > b {
                        scale
                    } else if a < b {
                        -scale
                    } else {
                        0.0
                    }
                };
                if self.rg(*pred) {
                    accumulate(grads, *pred, p.iter().zip(t).map(|(&a, &b)| sign(a, b)).collect());
                }
                if self.rg(*target) {
                    accumulate(grads, *target, p.iter().zip(t).map(|(&a, &b)| -sign(a, b)).collect());
                }
            }
            Op::Add { a, b } => {
                self.accumulate_if(grads, *a, g.to_vec());
                self.accumulate_if(grads, *b, g.to_vec());
            }
            Op::Scale { input, factor } => {
                self.accumulate_if(grads, *input, g.iter().map(|&v| v * factor).collect());
            }
        }
    }

    fn accumulate_if(&self, grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
        if self.rg(v) {
            accumulate(grads, v, d);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

/// Leaf gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
