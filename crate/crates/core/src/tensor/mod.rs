//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation happens
//! on a [`Graph`]: leaves are registered with [`Graph::leaf`], every op
//! appends a node, and [`Graph::backward`] fills the gradient of each leaf
//! that was created with `requires_grad`. A graph is rebuilt for every
//! forward pass.

mod container;
mod graph;
pub(crate) mod kernels;

pub use container::{read_tensors, write_tensors, NamedTensor, MAGIC};
pub use graph::{Conv2dSpec, Graph, Var, NORMALIZE_FLOOR};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense n-dimensional array of finite `f64` values in row-major order.
///
/// The empty shape `[]` denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting a length/shape disagreement or any
    /// non-finite value.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// I.i.d. normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for
    /// keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape("stack", t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Splits the leading axis into separate tensors.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("unstack", "scalar has no leading axis"))?;
        let inner: usize = rest.iter().product();
        Ok((0..n)
            .map(|i| Tensor {
                shape: rest.to_vec(),
                data: self.data[i * inner..(i + 1) * inner].to_vec(),
            })
            .collect())
    }
}
