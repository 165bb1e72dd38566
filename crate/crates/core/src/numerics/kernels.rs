//! Dense tensor kernels and their adjoints.
//!
//! Every kernel is a pure function of its inputs. The `*_backward` companions
//! take the upstream gradient and return gradients with respect to each
//! differentiable argument; the tape in [`super::tape`] wires them together.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::GridTensor;
use crate::error::{dim_err, Result};

pub fn matmul(a: &GridTensor, b: &GridTensor) -> Result<GridTensor> {
    let (r, k) = a.dims2()?;
    let (k2, c) = b.dims2()?;
    if k != k2 {
        return Err(dim_err("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; r * c];
    matmul_into(a.data(), b.data(), &mut out, r, k, c);
    GridTensor::matrix(r, c, out)
}

/// `out += a[r×k] · b[k×c]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[r×k] · b[c×k]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            out[i * c + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k×r]ᵀ · b[k×c]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let arow = &a[p * r..(p + 1) * r];
        let brow = &b[p * c..(p + 1) * c];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over a `[batch, channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Validates shapes. Stride 1 uses same-padding and needs an odd kernel;
    /// any larger stride uses no padding.
    pub fn resolve(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, groups: usize) -> Result<Self> {
        let (batch, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(dim_err("conv2d", format!("input axes {input:?}, expected C×H×W"))),
        };
        let [cout, cin_g, k, k2] = *kernel else {
            return Err(dim_err("conv2d", format!("kernel axes {kernel:?}, expected 4")));
        };
        if stride == 0 || groups == 0 {
            return Err(dim_err("conv2d", "stride and groups must be positive"));
        }
        if k != k2 {
            return Err(dim_err("conv2d", format!("non-square kernel {k}×{k2}")));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(dim_err(
                "conv2d",
                format!("channels in={cin} out={cout} not divisible by groups={groups}"),
            ));
        }
        if cin_g != cin / groups {
            return Err(dim_err(
                "conv2d",
                format!("kernel axis 1 is {cin_g}, expected C_in/groups = {}", cin / groups),
            ));
        }
        if bias != [cout] {
            return Err(dim_err("conv2d", format!("bias axes {bias:?}, expected [{cout}]")));
        }
        let pad = if stride == 1 {
            if k % 2 == 0 {
                return Err(dim_err("conv2d", format!("stride-1 kernel must be odd, got {k}")));
            }
            (k - 1) / 2
        } else {
            0
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(dim_err(
                "conv2d",
                format!("spatial size {h}×{w} smaller than kernel {k}"),
            ));
        }
        Ok(Self {
            batch,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: k,
            stride,
            groups,
            pad,
            out_height: (h + 2 * pad - k) / stride + 1,
            out_width: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.out_channels, self.out_height, self.out_width]
        } else {
            vec![self.out_channels, self.out_height, self.out_width]
        }
    }

    /// Visits every (output index, input index, kernel index) triple that
    /// contributes to the cross-correlation.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        let k = g.kernel;
        for n in 0..g.batch {
            for oc in 0..g.out_channels {
                let grp = oc / cout_g;
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    let in_base = (n * g.in_channels + ic) * g.height * g.width;
                    let out_base = (n * g.out_channels + oc) * g.out_height * g.out_width;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oc * cin_g + icl) * k + ky) * k + kx;
                            for oy in 0..g.out_height {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                if iy < 0 || iy >= g.height as isize {
                                    continue;
                                }
                                for ox in 0..g.out_width {
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if ix < 0 || ix >= g.width as isize {
                                        continue;
                                    }
                                    f(
                                        out_base + oy * g.out_width + ox,
                                        in_base + iy as usize * g.width + ix as usize,
                                        widx,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-`s` cross-correlation with `groups` channel groups. Accepts a
/// `C×H×W` input or a batched `B×C×H×W` input.
pub fn conv2d(
    input: &GridTensor,
    kernel: &GridTensor,
    bias: &GridTensor,
    stride: usize,
    groups: usize,
) -> Result<GridTensor> {
    let geo = ConvGeometry::resolve(input.shape(), kernel.shape(), bias.shape(), stride, groups)?;
    let plane = geo.out_height * geo.out_width;
    let mut out = vec![0.0; geo.batch * geo.out_channels * plane];
    for n in 0..geo.batch {
        for oc in 0..geo.out_channels {
            let base = (n * geo.out_channels + oc) * plane;
            out[base..base + plane].fill(bias.data()[oc]);
        }
    }
    let (x, w) = (input.data(), kernel.data());
    geo.for_each_tap(|o, i, k| out[o] += w[k] * x[i]);
    GridTensor::new(geo.out_shape(input.rank() == 4), out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward(
    input: &GridTensor,
    kernel: &GridTensor,
    grad_out: &GridTensor,
    stride: usize,
    groups: usize,
) -> Result<(GridTensor, GridTensor, GridTensor)> {
    let cout = kernel.shape()[0];
    let geo = ConvGeometry::resolve(input.shape(), kernel.shape(), &[cout], stride, groups)?;
    let (x, w, gy) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    geo.for_each_tap(|o, i, k| {
        gx[i] += w[k] * gy[o];
        gw[k] += x[i] * gy[o];
    });
    let plane = geo.out_height * geo.out_width;
    let mut gb = vec![0.0; cout];
    for n in 0..geo.batch {
        for (oc, g) in gb.iter_mut().enumerate() {
            let base = (n * cout + oc) * plane;
            *g += gy[base..base + plane].iter().sum::<f64>();
        }
    }
    Ok((
        GridTensor::new(input.shape().to_vec(), gx)?,
        GridTensor::new(kernel.shape().to_vec(), gw)?,
        GridTensor::vector(gb),
    ))
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Saved intermediates of a layer normalization, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub axis: usize,
}

pub fn layer_norm(
    input: &GridTensor,
    axis: usize,
    gamma: &GridTensor,
    beta: &GridTensor,
    eps: f64,
) -> Result<GridTensor> {
    layer_norm_forward(input, axis, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(
    input: &GridTensor,
    axis: usize,
    gamma: &GridTensor,
    beta: &GridTensor,
    eps: f64,
) -> Result<(GridTensor, LayerNormCache)> {
    let (outer, n, inner) = axis_split(input.shape(), axis, "layer_norm")?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(dim_err(
            "layer_norm",
            format!("gamma/beta length {}/{} vs axis size {n}", gamma.numel(), beta.numel()),
        ));
    }
    if eps <= 0.0 {
        return Err(dim_err("layer_norm", "eps must be positive"));
    }
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| x[idx(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (x[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = is;
            for j in 0..n {
                let h = (x[idx(j)] - mean) * is;
                xhat[idx(j)] = h;
                y[idx(j)] = gamma.data()[j] * h + beta.data()[j];
            }
        }
    }
    Ok((
        GridTensor::new(input.shape().to_vec(), y)?,
        LayerNormCache {
            normalized: xhat,
            inv_std,
            axis,
        },
    ))
}

/// Gradients of a layer normalization with respect to input, gamma, and beta.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &GridTensor,
    grad_out: &GridTensor,
) -> Result<(GridTensor, GridTensor, GridTensor)> {
    let (outer, n, inner) = axis_split(grad_out.shape(), cache.axis, "layer_norm_backward")?;
    let gy = grad_out.data();
    let xhat = &cache.normalized;
    let mut gx = vec![0.0; gy.len()];
    let mut gg = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..n {
                let d = gy[idx(j)] * gamma.data()[j];
                sum_d += d;
                sum_dx += d * xhat[idx(j)];
                gg[j] += gy[idx(j)] * xhat[idx(j)];
                gb[j] += gy[idx(j)];
            }
            let is = cache.inv_std[o * inner + i];
            for j in 0..n {
                let d = gy[idx(j)] * gamma.data()[j];
                gx[idx(j)] = is * (d - sum_d / n as f64 - xhat[idx(j)] * sum_dx / n as f64);
            }
        }
    }
    Ok((
        GridTensor::new(grad_out.shape().to_vec(), gx)?,
        GridTensor::vector(gg),
        GridTensor::vector(gb),
    ))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Exact `x·Φ(x)`.
pub fn gelu(input: &GridTensor) -> GridTensor {
    input.map(gelu_scalar)
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_rows(input: &GridTensor) -> GridTensor {
    let c = *input.shape().last().unwrap();
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Adjoint of a row softmax given its output `y` and upstream gradient.
pub fn softmax_rows_backward(output: &GridTensor, grad_out: &GridTensor) -> GridTensor {
    let c = *output.shape().last().unwrap();
    let mut gx = grad_out.clone();
    for (g, y) in gx.data_mut().chunks_mut(c).zip(output.data().chunks(c)) {
        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        for (gv, &yv) in g.iter_mut().zip(y) {
            *gv = yv * (*gv - dot);
        }
    }
    gx
}

/// Per-channel mean over the two trailing spatial axes. `C×H×W → C` or
/// `B×C×H×W → B×C`.
pub fn global_avg_pool(input: &GridTensor) -> Result<GridTensor> {
    let shape = input.shape();
    let (lead, plane): (Vec<usize>, usize) = match *shape {
        [c, h, w] => (vec![c], h * w),
        [b, c, h, w] => (vec![b, c], h * w),
        _ => return Err(dim_err("global_avg_pool", format!("axes {shape:?}"))),
    };
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    GridTensor::new(lead, data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &GridTensor) -> Result<GridTensor> {
    let plane: usize = input_shape[input_shape.len() - 2..].iter().product();
    let mut data = Vec::with_capacity(grad_out.numel() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    GridTensor::new(input_shape.to_vec(), data)
}

/// Mean over one axis, removing it from the shape.
pub fn mean_axis(input: &GridTensor, axis: usize) -> Result<GridTensor> {
    let shape = input.shape();
    let (outer, n, inner) = axis_split(shape, axis, "mean_axis")?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out[o * inner + i] += input.data()[(o * n + j) * inner + i] / n as f64;
            }
        }
    }
    let mut new_shape: Vec<usize> = shape.to_vec();
    new_shape.remove(axis);
    if new_shape.is_empty() {
        new_shape.push(1);
    }
    GridTensor::new(new_shape, out)
}

pub fn mean_axis_backward(input_shape: &[usize], axis: usize, grad_out: &GridTensor) -> Result<GridTensor> {
    let (outer, n, inner) = axis_split(input_shape, axis, "mean_axis_backward")?;
    let mut gx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                gx[(o * n + j) * inner + i] = grad_out.data()[o * inner + i] / n as f64;
            }
        }
    }
    GridTensor::new(input_shape.to_vec(), gx)
}
