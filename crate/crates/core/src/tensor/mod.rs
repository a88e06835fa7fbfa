//! Dense NCHW tensors with a small reverse-mode autodiff tape.
//!
//! Everything the white-balance network needs lives here: same-padded and
//! strided convolutions, stride-2 transposed convolutions, 2x2 max pooling,
//! ReLU, channel concatenation and an L1 loss, plus Adam and a
//! finite-difference gradient checker.

mod adam;
mod gemm;
mod gradcheck;
mod kernels;
mod tape;

use std::fmt;

use crate::error::{Result, WbError};

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use kernels::{conv2d_forward, conv_transpose2d_forward, maxpool2x2_forward};
pub use tape::{Gradients, Graph, Reduction, Var};

/// Rank-4 `(batch, channels, height, width)` array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![0.0; dims.iter().product()],
            grad: None,
        }
    }

    pub fn filled(dims: [usize; 4], value: f32) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(WbError::shape(
                "Tensor4::from_vec",
                format!("{want} elements for {dims:?}"),
                data.len(),
            ));
        }
        Ok(Tensor4 {
            dims,
            data,
            grad: None,
        })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Tensor4 {
            dims,
            data,
            grad: None,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: f32) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, [n, c, y, x]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; it must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(WbError::shape(
                "Tensor4::set_grad",
                self.data.len(),
                grad.len(),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f32>> {
        self.grad.take()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Inner product in f64, used by adjoint checks.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.dims != other.dims {
            return Err(WbError::shape(
                "Tensor4::dot",
                fmt_dims(self.dims),
                fmt_dims(other.dims),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// Copies sample `n` out as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks batch-of-N tensors with identical per-sample dims.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| WbError::Config("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut batch = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != first.dims[1..] {
                return Err(WbError::shape("Tensor4::stack", fmt_dims(first.dims), fmt_dims(p.dims)));
            }
            batch += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            dims: [batch, c, h, w],
            data,
            grad: None,
        })
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub(crate) fn fmt_dims(d: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", d[0], d[1], d[2], d[3])
}

/// A trainable tensor plus its Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor4,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor4) -> Self {
        let n = tensor.len();
        Parameter {
            name: name.into(),
            tensor,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    /// Clears optimizer state while keeping the values.
    pub fn reset_optimizer(&mut self) {
        self.adam_m.iter_mut().for_each(|v| *v = 0.0);
        self.adam_v.iter_mut().for_each(|v| *v = 0.0);
        self.step_count = 0;
    }
}
