use super::graph::{softmax_xent, Graph};
use crate::error::{invalid, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Mean(Var, Vec<usize>),
    SumAll(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Matmul(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// Nodes that depend on no [`Graph::param`] are stored without backward
/// bookkeeping and never receive a gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through differentiable ops.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Keeps the gradient of an intermediate node after [`Tape::backward`].
    /// Parameters are always kept; other intermediates are freed as soon as
    /// they have been propagated.
    pub fn retain(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Pulls the gradient of a one-element `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.val(loss).len() != 1 {
            return invalid(format!(
                "loss must be a scalar, got shape {:?}",
                self.val(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.val(loss).shape().to_vec()));
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &gi)?,
                    slot => *slot = Some(gi),
                }
            }
            if node.retain {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, g.sum_to_shape(self.val(*a).shape())?),
                (*b, g.sum_to_shape(self.val(*b).shape())?),
            ],
            Op::Sub(a, b) => vec![
                (*a, g.sum_to_shape(self.val(*a).shape())?),
                (*b, g.scale(-1.0).sum_to_shape(self.val(*b).shape())?),
            ],
            Op::Mul(a, b) => vec![
                (*a, g.mul(self.val(*b))?.sum_to_shape(self.val(*a).shape())?),
                (*b, g.mul(self.val(*a))?.sum_to_shape(self.val(*b).shape())?),
            ],
            Op::Div(a, b) => {
                let bv = self.val(*b);
                let ga = g.div(bv)?;
                let gb = ga.mul(out)?.scale(-1.0);
                vec![
                    (*a, ga.sum_to_shape(self.val(*a).shape())?),
                    (*b, gb.sum_to_shape(bv.shape())?),
                ]
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mask_a = av.zip_with(bv, |x, y| if x >= y { 1.0 } else { 0.0 })?;
                let ga = g.mul(&mask_a)?;
                let gb = g.sub(&ga)?;
                vec![
                    (*a, ga.sum_to_shape(av.shape())?),
                    (*b, gb.sum_to_shape(bv.shape())?),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sqrt(a) => vec![(*a, g.zip_with(out, |gi, o| 0.5 * gi / o)?)],
            Op::Square(a) => vec![(*a, g.zip_with(self.val(*a), |gi, x| 2.0 * gi * x)?)],
            // Subgradient 0 at the kink.
            Op::Relu(a) => vec![(
                *a,
                g.zip_with(self.val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?,
            )],
            Op::Sigmoid(a) => vec![(*a, g.zip_with(out, |gi, s| gi * s * (1.0 - s))?)],
            Op::Mean(a, axes) => {
                let av = self.val(*a);
                let count: usize = axes.iter().map(|&i| av.dim(i)).product();
                vec![(*a, g.broadcast_to(av.shape())?.scale(1.0 / count as f64))]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(self.val(*a).shape().to_vec(), g.data()[0]))],
            Op::Reshape(a) => vec![(*a, g.reshape(self.val(*a).shape().to_vec())?)],
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = tensor::conv2d_backward(
                    self.val(*x),
                    self.val(*w),
                    g,
                    *stride,
                    *pad,
                    self.nodes[x.0].needs_grad,
                    self.nodes[w.0].needs_grad,
                )?;
                gx.map(|t| (*x, t))
                    .into_iter()
                    .chain(gw.map(|t| (*w, t)))
                    .collect()
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, tensor::matmul(g, &bv.t()?)?),
                    (*b, tensor::matmul(&av.t()?, g)?),
                ]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.dim(1);
                let mut d = probs.clone().into_data();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                let scale = g.data()[0] / n as f64;
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(vec![n, k], d)?)]
            }
        })
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Maximum(a, b)
        | Op::Matmul(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Mean(a, _)
        | Op::SumAll(a)
        | Op::Reshape(a) => vec![*a],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

impl Graph for Tape {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
            retain: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).add(self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).sub(self.val(*b))?;
        Ok(self.push(v, Op::Sub(*a, *b)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).mul(self.val(*b))?;
        Ok(self.push(v, Op::Mul(*a, *b)))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.val(*a).div(self.val(*b))?;
        Ok(self.push(v, Op::Div(*a, *b)))
    }

    fn maximum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self
            .val(*a)
            .zip_with(self.val(*b), |x, y| if x >= y { x } else { y })?;
        Ok(self.push(v, Op::Maximum(*a, *b)))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).scale(s);
        self.push(v, Op::Scale(*a, s))
    }

    fn add_scalar(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).add_scalar(s);
        self.push(v, Op::AddScalar(*a))
    }

    fn sqrt(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(f64::sqrt);
        self.push(v, Op::Sqrt(*a))
    }

    fn square(&mut self, a: &Var) -> Var {
        let v = self.val(*a).map(|x| x * x);
        self.push(v, Op::Square(*a))
    }

    fn relu(&mut self, a: &Var) -> Var {
        let v = tensor::relu(self.val(*a));
        self.push(v, Op::Relu(*a))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = tensor::sigmoid(self.val(*a));
        self.push(v, Op::Sigmoid(*a))
    }

    fn mean(&mut self, a: &Var, axes: &[usize]) -> Result<Var> {
        let v = self.val(*a).mean_axes(axes)?;
        Ok(self.push(v, Op::Mean(*a, axes.to_vec())))
    }

    fn sum_all(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(self.val(*a).sum());
        self.push(v, Op::SumAll(*a))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(*a).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(*a)))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
        let v = tensor::conv2d(self.val(*x), self.val(*w), stride, pad)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x: *x,
                w: *w,
                stride,
                pad,
            },
        ))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = tensor::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Matmul(*a, *b)))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_xent(self.val(*logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: *logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}
