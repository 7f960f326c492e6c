use crate::error::Result;
use crate::tensor::{self, Tensor};

/// The operations networks and normalizers are written against.
///
/// [`Eager`] evaluates immediately and keeps nothing; [`super::Tape`]
/// records every node so gradients can be pulled back afterwards. Binary
/// elementwise ops broadcast over unit extents.
pub trait Graph {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    /// A value gradients are not taken with respect to.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A differentiable leaf.
    fn param(&mut self, t: Tensor) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Elementwise maximum; ties send the gradient to `a`.
    fn maximum(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn scale(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, s: f64) -> Self::V;
    fn sqrt(&mut self, a: &Self::V) -> Self::V;
    fn square(&mut self, a: &Self::V) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;

    /// Keepdim mean over `axes`.
    fn mean(&mut self, a: &Self::V, axes: &[usize]) -> Result<Self::V>;
    /// Sum of every element, as a one-element tensor.
    fn sum_all(&mut self, a: &Self::V) -> Self::V;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, stride: usize, pad: usize) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// Mean softmax cross-entropy of `N × K` logits against class labels.
    fn cross_entropy(&mut self, logits: &Self::V, labels: &[usize]) -> Result<Self::V>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }
}

/// Evaluates ops directly on tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.div(b)
    }

    fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_with(b, |x, y| if x >= y { x } else { y })
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }

    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        a.add_scalar(s)
    }

    fn sqrt(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::sqrt)
    }

    fn square(&mut self, a: &Tensor) -> Tensor {
        a.map(|v| v * v)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        tensor::relu(a)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        tensor::sigmoid(a)
    }

    fn mean(&mut self, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
        a.mean_axes(axes)
    }

    fn sum_all(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }

    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshape(shape.to_vec())
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        tensor::conv2d(x, w, stride, pad)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }

    fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (loss, _) = softmax_xent(logits, labels)?;
        Ok(Tensor::scalar(loss))
    }
}

/// Mean cross-entropy and the row-wise softmax it was computed from.
pub(crate) fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return crate::error::shape_err(format!(
            "cross-entropy needs N x K logits for {} labels, got {:?}",
            labels.len(),
            logits.shape()
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return crate::error::invalid(format!("label {y} out of range for {k} classes"));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            probs[i * k + j] = (row[j] - m).exp() / z;
        }
        loss += z.ln() + m - row[y];
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], probs)))
}
