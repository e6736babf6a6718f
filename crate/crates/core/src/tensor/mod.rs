//! Dense row-major `f32` tensors and the handful of differentiable kernels the
//! fusion pipeline is built from.
//!
//! Image-like tensors are laid out `rows × cols × channels`. Every kernel that
//! reduces (matmul, convolution, attention) accumulates in `f64` and rounds
//! once, so results do not depend on loop order or thread count.
//!
//! Gradients are vector-Jacobian products: each differentiable op has a
//! `*_vjp` companion taking the upstream gradient and returning a
//! [`GradPair`] keyed by input name.

mod conv;
mod grad;
mod ops;
mod pool;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{BevError, Result};

pub use conv::{conv2d, conv2d_vjp, Kernel};
pub use grad::{finite_diff_grad, max_abs_diff};
pub use ops::{
    add_row_bias, affine_norm, affine_norm_vjp, matmul, matmul_vjp, relu, relu_vjp,
    softmax_lastdim, softmax_lastdim_vjp, transpose2,
};
pub use pool::{maxpool2d_with_indices, maxunpool2d, PoolIndices};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(BevError::shape("tensor needs at least one axis"));
        }
        if shape.contains(&0) {
            return Err(BevError::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(BevError::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "bad shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each({
            let mut f = f;
            move |(i, x)| *x = f(i)
        });
        t
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(BevError::shape(format!(
                "expected rank 2, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols, channels)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(BevError::shape(format!(
                "expected rank 3, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, r: usize, c: usize, k: usize) -> f32 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(r * w + c) * ch + k]
    }

    /// Channel vector at a pixel of a rank-3 tensor.
    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let (w, ch) = (self.shape[1], self.shape[2]);
        let o = (r * w + c) * ch;
        &self.data[o..o + ch]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(BevError::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(BevError::shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Channel concatenation of two rank-3 tensors, `self` first.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (h, w, ca) = self.dims3()?;
        let (h2, w2, cb) = other.dims3()?;
        if (h, w) != (h2, w2) {
            return Err(BevError::shape(format!(
                "spatial extents {h}x{w} vs {h2}x{w2}"
            )));
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for (a, b) in self.data.chunks(ca).zip(other.data.chunks(cb)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Tensor::new(vec![h, w, ca + cb], data)
    }

    /// Channels `[start, end)` of a rank-3 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        if start >= end || end > c {
            return Err(BevError::shape(format!(
                "channel range {start}..{end} of {c}"
            )));
        }
        let data = self
            .data
            .chunks(c)
            .flat_map(|px| px[start..end].iter().copied())
            .collect();
        Tensor::new(vec![h, w, end - start], data)
    }
}

/// A forward value together with gradients of a downstream scalar with respect
/// to named inputs or parameters.
#[derive(Clone, Debug)]
pub struct GradPair {
    pub value: Tensor,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradPair {
    pub fn new(value: Tensor) -> Self {
        GradPair {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, grad: Tensor) -> Self {
        self.grads.insert(name.to_string(), grad);
        self
    }

    /// Gradient by name; panics if the op does not produce it.
    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient named {name:?}"))
    }

    /// First element of the value, for scalar losses.
    pub fn scalar(&self) -> f32 {
        self.value.data()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f32);
        let b = Tensor::from_fn(&[2, 3, 3], |i| -(i as f32));
        let ab = a.concat_channels(&b).unwrap();
        assert_eq!(ab.shape(), &[2, 3, 5]);
        assert_eq!(ab.slice_channels(0, 2).unwrap(), a);
        assert_eq!(ab.slice_channels(2, 5).unwrap(), b);
    }
}
