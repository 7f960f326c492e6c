use super::{DimSet, Rng, Tensor};
use crate::error::{invalid, shape_err, Result};

/// He-normal initialization: i.i.d. `N(0, 2/fan_in)`.
pub fn gaussian_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return invalid("fan_in must be positive");
    }
    let mut t = Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])?;
    rng.fill_normal(t.data_mut(), (2.0 / fan_in as f64).sqrt());
    Ok(t)
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is stored as `a_rows × a_cols`; with `ta` the product uses its
/// transpose. Same for `b`. `c` must hold the `m × n` result.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k) = if ta {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let (k2, n) = if tb {
        (b_cols, b_rows)
    } else {
        (b_rows, b_cols)
    };
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    // SAFETY: the asserts above guarantee every index the kernel touches,
    // (i*rs + p*cs) for i < rows and p < cols of each operand, lies inside
    // the corresponding slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        a.data(),
        m,
        k,
        false,
        b.data(),
        k,
        n,
        false,
        0.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `X = W Y` with activations stored feature × batch.
pub fn linear(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    matmul(weight, input)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Promotes a rank-2 `N × C` tensor to `N × C × 1 × 1`.
fn as_4d(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        4 => Ok(x.clone()),
        2 => x.reshape(vec![x.dim(0), x.dim(1), 1, 1]),
        _ => shape_err(format!(
            "statistics need a rank-2 or rank-4 tensor, got {:?}",
            x.shape()
        )),
    }
}

/// Keepdim mean and population variance over `dims`, expanded so both
/// broadcast against `x`. Grouped statistics are repeated over the channels
/// of each group.
pub fn moments(x: &Tensor, dims: &DimSet) -> Result<(Tensor, Tensor)> {
    let x4 = as_4d(x)?;
    let plan = dims.plan(x4.shape())?;
    let v = x4.reshape(plan.view.clone())?;
    let mean = v.mean_axes(&plan.axes)?;
    let centered = v.sub(&mean)?;
    let var = centered.map(|d| d * d).mean_axes(&plan.axes)?;
    Ok((expand_stat(&mean, &plan, x)?, expand_stat(&var, &plan, x)?))
}

/// Root mean square over `dims`, expanded like [`moments`].
pub fn rms(x: &Tensor, dims: &DimSet) -> Result<Tensor> {
    let x4 = as_4d(x)?;
    let plan = dims.plan(x4.shape())?;
    let v = x4.reshape(plan.view.clone())?;
    let ms = v.map(|d| d * d).mean_axes(&plan.axes)?;
    expand_stat(&ms.map(f64::sqrt), &plan, x)
}

fn expand_stat(stat: &Tensor, plan: &super::dims::ReducePlan, x: &Tensor) -> Result<Tensor> {
    let out = if plan.grouped {
        let mut target = stat.shape().to_vec();
        target[2] = plan.view[2];
        let s = stat.broadcast_to(&target)?;
        let (n, c) = (x.dim(0), x.dim(1));
        if target[3] == 1 {
            s.into_reshape(vec![n, c, 1, 1])?
        } else {
            s.into_reshape(vec![
                n,
                c,
                x.shape().get(2).copied().unwrap_or(1),
                x.shape().get(3).copied().unwrap_or(1),
            ])?
        }
    } else {
        stat.clone()
    };
    if x.rank() == 2 {
        let s = out.shape();
        return out.reshape(vec![s[0], s[1]]);
    }
    Ok(out)
}

/// Average over height and width: `N × C × H × W` to `N × C × 1 × 1`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return shape_err(format!("pooling needs a 4-D tensor, got {:?}", x.shape()));
    }
    x.mean_axes(&[2, 3])
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return shape_err(format!(
                "conv2d needs 4-D input and weight, got {input:?} and {weight:?}"
            ));
        }
        if stride == 0 {
            return invalid("stride must be positive");
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != cin {
            return shape_err(format!(
                "conv2d input has {cin} channels but weight expects {wc}"
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution needs no patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Patch matrix of one sample: `(cin·kh·kw) × (ho·wo)`.
pub(crate) fn im2col(sample: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row + oi * g.wo..row + (oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one sample's input gradient.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, sample: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut sample[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ii as usize * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[base + jj as usize] += cols[row + oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `N × Cin × H × W` input with `Cout × Cin × kH × kW`
/// weights, zero padding, no bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for s in 0..g.n {
        let sample = &input.data()[s * in_per..(s + 1) * in_per];
        let patches: &[f64] = if g.is_pointwise() {
            sample
        } else {
            im2col(sample, &g, &mut cols);
            &cols
        };
        gemm(
            1.0,
            weight.data(),
            g.cout,
            k,
            false,
            patches,
            k,
            p,
            false,
            0.0,
            &mut out[s * out_per..(s + 1) * out_per],
        );
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return shape_err(format!(
            "conv2d upstream gradient has shape {:?}",
            grad_out.shape()
        ));
    }
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut gin = if need_input {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    let mut gw = if need_weight {
        vec![0.0; weight.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * p }];
    let mut gcols = vec![
        0.0;
        if need_input && !g.is_pointwise() {
            k * p
        } else {
            0
        }
    ];
    for s in 0..g.n {
        let gout = &grad_out.data()[s * out_per..(s + 1) * out_per];
        if need_weight {
            let sample = &input.data()[s * in_per..(s + 1) * in_per];
            let patches: &[f64] = if g.is_pointwise() {
                sample
            } else {
                im2col(sample, &g, &mut cols);
                &cols
            };
            gemm(
                1.0, gout, g.cout, p, false, patches, k, p, true, 1.0, &mut gw,
            );
        }
        if need_input {
            let dst = &mut gin[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(
                    1.0,
                    weight.data(),
                    g.cout,
                    k,
                    true,
                    gout,
                    g.cout,
                    p,
                    false,
                    0.0,
                    dst,
                );
            } else {
                gemm(
                    1.0,
                    weight.data(),
                    g.cout,
                    k,
                    true,
                    gout,
                    g.cout,
                    p,
                    false,
                    0.0,
                    &mut gcols,
                );
                col2im_add(&gcols, &g, dst);
            }
        }
    }
    let gin = need_input.then(|| Tensor::from_parts(input.shape().to_vec(), gin));
    let gw = need_weight.then(|| Tensor::from_parts(weight.shape().to_vec(), gw));
    Ok((gin, gw))
}
