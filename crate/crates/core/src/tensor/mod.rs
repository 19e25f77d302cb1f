//! Dense tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is plain data: a shape and row-major values. Differentiation
//! happens on a [`Tape`], which records every primitive applied to its
//! [`Var`] handles and replays them in reverse on [`Tape::backward`]. Gradient
//! buffers are allocated lazily, only for nodes that require a gradient.

mod checkpoint;
mod edge;
mod gradcheck;
mod ops;
mod param;
mod tape;

#[cfg(test)]
mod ops_tests;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{BatchNormState, DropoutMode, BN_EPS, BN_MOMENTUM};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Neighbor indices of shape `[batch, points, k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndices {
    batch: usize,
    points: usize,
    k: usize,
    data: Vec<u32>,
}

impl NeighborIndices {
    pub fn new(batch: usize, points: usize, k: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != batch * points * k {
            return Err(Error::shape(format!(
                "neighbor indices [{batch}, {points}, {k}] need {} entries, got {}",
                batch * points * k,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&j| j as usize >= points) {
            return Err(Error::shape(format!("neighbor index {bad} out of range for {points} points")));
        }
        Ok(NeighborIndices { batch, points, k, data })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.points, self.k]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn row(&self, b: usize, i: usize) -> &[u32] {
        let start = (b * self.points + i) * self.k;
        &self.data[start..start + self.k]
    }

    /// The first `k` neighbors of every row; rows are sorted nearest first.
    pub fn prefix(&self, k: usize) -> Result<NeighborIndices> {
        if k > self.k {
            return Err(Error::contract(format!("prefix {k} longer than rows of {}", self.k)));
        }
        let mut data = Vec::with_capacity(self.batch * self.points * k);
        for row in self.data.chunks(self.k) {
            data.extend_from_slice(&row[..k]);
        }
        Ok(NeighborIndices { batch: self.batch, points: self.points, k, data })
    }
}
