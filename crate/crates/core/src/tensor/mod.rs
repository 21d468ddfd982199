//! Dense row-major tensors and the differentiable operator set.
//!
//! [`Tensor`] is a plain container. Differentiation happens on a [`Tape`],
//! which records every operator applied to its [`Var`] handles and replays
//! them in reverse to produce [`Gradients`].
//!
//! 4-D activations use `(batch, channel, height, width)` axis order.

mod gradcheck;
mod kernels;
mod scalar;
mod tape;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::Backward;

use crate::error::{Error, Result};

/// Dense N-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::invalid("tensor", "shape must have at least one axis"));
        }
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {:?} holds {} values but {} were supplied",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::invalid(
                "accumulate_grad",
                format!("gradient of {} values for tensor of {}", delta.len(), self.data.len()),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The four axes of a BCHW tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::invalid(
                op,
                format!("expected a 4-D (B,C,H,W) tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors of shape `[1, ...]` (or equal shapes) along axis 0.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors to stack"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(Error::shape("stack_batch", &first.shape, &p.shape));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(inner);
        Tensor::from_vec(&shape, data)
    }

    /// The `index`-th entry along axis 0, keeping a leading axis of 1.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let b = self.shape[0];
        if index >= b {
            return Err(Error::invalid(
                "batch_item",
                format!("index {index} out of range for batch of {b}"),
            ));
        }
        let per = self.numel() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(&shape, self.data[index * per..(index + 1) * per].to_vec())
    }
}
