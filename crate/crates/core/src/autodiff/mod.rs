//! Reverse-mode differentiation and a finite-difference oracle.

mod graph;
mod tape;
mod trace;

pub use graph::{Eager, Graph};
pub use tape::{Gradients, Tape, Var};
pub use trace::{
    backward_with_trace, layerwise_grad_norms, Aggregation, BackwardPass, GradientTrace, LossKind,
};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {h}"));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Gradient of `f` at `x` by building the graph on a fresh tape.
pub fn grad_of(
    f: impl FnOnce(&mut Tape, &Var) -> Result<Var>,
    x: &Tensor,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, &xv)?;
    let value = tape.value(&loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    Ok((value, g))
}
