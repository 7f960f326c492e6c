//! Dense row-major `f64` tensors and the primitives the rest of the crate
//! builds on.
//!
//! Activations use the layout batch × channel × height × width; convolution
//! weights use out-channel × in-channel × kH × kW. Every operation is a pure
//! function of its inputs and reduces in a fixed (row-major) order, so results
//! are bit-reproducible.

mod dims;
mod ops;
mod rng;

pub use dims::{Axis, DimSet};
pub use ops::{
    conv2d, gaussian_init, global_avg_pool, linear, matmul, moments, relu, rms, sigmoid,
};
pub use rng::Rng;

pub(crate) use ops::{conv2d_backward, gemm};

use crate::error::{invalid, shape_err, Result};

/// Maximum supported tensor order.
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
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
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op with broadcasting over unit extents.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let o = pad4(&out_shape);
        let mut data = Vec::with_capacity(o.iter().product());
        for i0 in 0..o[0] {
            for i1 in 0..o[1] {
                for i2 in 0..o[2] {
                    let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..o[3] {
                        data.push(f(self.data[ba + i3 * sa[3]], other.data[bb + i3 * sb[3]]));
                    }
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|v| v + s)
    }

    /// In-place `self += alpha * other` for equal shapes.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("axpy shapes {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Sum over the given axes, keeping them as unit extents.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        for &a in axes {
            if a >= self.rank() {
                return invalid(format!("axis {a} out of range for rank {}", self.rank()));
            }
        }
        let mut out_shape = self.shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let so = broadcast_strides(&out_shape, &self.shape);
        let s = pad4(&self.shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut k = 0;
        for i0 in 0..s[0] {
            for i1 in 0..s[1] {
                for i2 in 0..s[2] {
                    let base = i0 * so[0] + i1 * so[1] + i2 * so[2];
                    for i3 in 0..s[3] {
                        out[base + i3 * so[3]] += self.data[k];
                        k += 1;
                    }
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Mean over the given axes, keeping them as unit extents.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape.get(a).copied().unwrap_or(1))
            .product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Reduces a broadcast result back onto `shape` by summing expanded axes.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if shape.len() != self.rank() {
            return shape_err(format!("cannot reduce {:?} onto {shape:?}", self.shape));
        }
        let axes: Vec<usize> = (0..shape.len())
            .filter(|&i| shape[i] == 1 && self.shape[i] != 1)
            .collect();
        let r = self.sum_axes(&axes)?;
        if r.shape != shape {
            return shape_err(format!("cannot reduce {:?} onto {shape:?}", self.shape));
        }
        Ok(r)
    }

    /// Broadcasts onto a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        Tensor::zeros(shape.to_vec()).zip_with(self, |_, b| b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius / Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |a-b| / max(|b|_inf, tiny)`, a scale-aware comparison.
    pub fn rel_diff(&self, reference: &Tensor) -> f64 {
        let scale = reference.max_abs().max(1e-300);
        self.max_abs_diff(reference) / scale
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err(format!("transpose needs a matrix, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.shape[1];
        (0..self.shape[0]).map(|i| self.data[i * c + j]).collect()
    }

    /// Flattens every sample of a batch-first tensor into a column:
    /// `N × rest` becomes `rest × N`.
    pub fn samples_as_columns(&self) -> Result<Self> {
        let n = self.shape[0];
        let rest = self.len() / n.max(1);
        self.reshape(vec![n, rest])?.t()
    }

    /// Contiguous slice of a batch-first tensor along axis 0.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return invalid(format!("batch slice {start}..{end} of {}", self.shape[0]));
        }
        let per = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Concatenates batch-first tensors along axis 0.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::InvalidArgument("empty concat".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::new();
        shape[0] = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return shape_err(format!("concat {:?} with {:?}", first.shape, p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return shape_err(format!("rank must be 1..={MAX_RANK}, got {shape:?}"));
    }
    if shape.contains(&0) {
        return shape_err(format!("zero extent in shape {shape:?}"));
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("cannot broadcast {a:?} with {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut o = [1; 4];
    let off = 4 - shape.len();
    o[off..].copy_from_slice(shape);
    o
}

/// Strides of `shape` laid out row-major, with zero stride on axes that are
/// broadcast up to `target`. Both are padded to rank 4.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> [usize; 4] {
    let s = pad4(shape);
    let t = pad4(target);
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if s[i] == 1 && t[i] != 1 { 0 } else { acc };
        acc *= s[i];
    }
    strides
}
