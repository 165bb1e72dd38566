//! A minimal reverse-mode tape over [`GridTensor`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every node after all of its consumers.

use std::collections::BTreeMap;

use super::kernels::{self, LayerNormCache};
use super::{GridTensor, ParamGrads};
use crate::error::{dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, GridTensor),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Powf(Var, f64),
    Sum(Var),
    MeanRows(Var),
    SumCols(Var),
    MeanAxis(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        groups: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Softmax(Var),
    GlobalAvgPool(Var),
    MulChannel(Var, Var),
    BatchOuter(Var, Var),
    SoftMasks {
        labels: Var,
        classes: usize,
        sharpness: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        rows: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: GridTensor,
    op: Op,
}

/// Records tensor operations for one reverse-mode sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of a scalar output with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<GridTensor>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> GridTensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| GridTensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of every named parameter registered on the tape.
    pub fn params(&self) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (name, &v) in &self.params {
            out.insert(name.clone(), self.wrt(v));
        }
        out
    }
}

fn check_same(op: &'static str, a: &GridTensor, b: &GridTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: GridTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &GridTensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: GridTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a named parameter. Repeated registrations of the same name
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str, value: &GridTensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        for (o, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= bv;
        }
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        for (o, &bv) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(y, Op::Mul(a, b)))
    }

    fn row_width(&self, a: Var, row: Var, op: &'static str) -> Result<usize> {
        let c = *self.value(a).shape().last().unwrap();
        if self.value(row).numel() != c {
            return Err(dim_err(
                op,
                format!("row of {} values vs width {c}", self.value(row).numel()),
            ));
        }
        Ok(c)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.row_width(a, row, "add_row")?;
        let mut y = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in y.data_mut().chunks_mut(c) {
            for (o, &rv) in chunk.iter_mut().zip(r) {
                *o += rv;
            }
        }
        Ok(self.push(y, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.row_width(a, row, "mul_row")?;
        let mut y = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in y.data_mut().chunks_mut(c) {
            for (o, &rv) in chunk.iter_mut().zip(r) {
                *o *= rv;
            }
        }
        Ok(self.push(y, Op::MulRow(a, row)))
    }

    /// Elementwise product with a fixed tensor (masks, dropped paths).
    pub fn mul_const(&mut self, a: Var, c: GridTensor) -> Result<Var> {
        check_same("mul_const", self.value(a), &c)?;
        let mut y = self.value(a).clone();
        for (o, &cv) in y.data_mut().iter_mut().zip(c.data()) {
            *o *= cv;
        }
        Ok(self.push(y, Op::MulConst(a, c)))
    }

    /// Multiplies `a` by a single-element node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(dim_err("mul_scalar_var", "scale must have one element"));
        }
        let k = self.value(s).item();
        let y = self.value(a).map(|v| v * k);
        Ok(self.push(y, Op::MulScalarVar(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a).map(|v| v * k);
        self.push(y, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a).map(|v| v + k);
        self.push(y, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        self.push(y, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        self.push(y, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = kernels::gelu(self.value(a));
        self.push(y, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v * v);
        self.push(y, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let y = self.value(a).map(|v| v.powf(p));
        self.push(y, Op::Powf(a, p))
    }

    /// `bound·tanh(a / bound)`: smooth clamp into `[-bound, bound]`.
    pub fn soft_clamp(&mut self, a: Var, bound: f64) -> Var {
        let t = self.scale(a, 1.0 / bound);
        let t = self.tanh(t);
        self.scale(t, bound)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = GridTensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Column means of a `B×C` matrix, giving `1×C`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v / r as f64;
            }
        }
        Ok(self.push(GridTensor::matrix(1, c, out)?, Op::MeanRows(a)))
    }

    /// Row sums of a `B×C` matrix, giving `B×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = self.value(a).data().chunks(c).map(|row| row.iter().sum()).collect();
        Ok(self.push(GridTensor::matrix(r, 1, out)?, Op::SumCols(a)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = kernels::mean_axis(self.value(a), axis)?;
        Ok(self.push(y, Op::MeanAxis(a, axis)))
    }

    /// Columns `start..end` of a `B×C` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start >= end || end > c {
            return Err(dim_err("slice_cols", format!("range {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in self.value(a).data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(self.push(GridTensor::matrix(r, w, out)?, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(dim_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(GridTensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Column permutation: output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if perm.len() != c {
            return Err(dim_err(
                "permute_cols",
                format!("{} indices for {c} columns", perm.len()),
            ));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            out.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(self.push(GridTensor::matrix(r, c, out)?, Op::Permute(a, perm.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, groups: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, groups)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                groups,
            },
        ))
    }

    pub fn layer_norm(&mut self, input: Var, axis: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            kernels::layer_norm_forward(self.value(input), axis, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let y = kernels::softmax_rows(self.value(a));
        self.push(y, Op::Softmax(a))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let y = kernels::global_avg_pool(self.value(a))?;
        Ok(self.push(y, Op::GlobalAvgPool(a)))
    }

    /// Scales channel `c` of a `B×C×H×W` tensor by `gamma[c]`.
    pub fn mul_channel(&mut self, a: Var, gamma: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(dim_err("mul_channel", format!("axes {shape:?}")));
        };
        if self.value(gamma).numel() != c {
            return Err(dim_err("mul_channel", "gamma length vs channels"));
        }
        let g = self.value(gamma).data().to_vec();
        let mut y = self.value(a).clone();
        for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v *= g[i % c]);
        }
        Ok(self.push(y, Op::MulChannel(a, gamma)))
    }

    /// Per-row outer product: `w[B×M]`, `v[B×D]` → `B×(M·D)` with
    /// `out[b, m·D + j] = w[b,m]·v[b,j]`.
    pub fn batch_outer(&mut self, w: Var, v: Var) -> Result<Var> {
        let (b, m) = self.value(w).dims2()?;
        let (b2, d) = self.value(v).dims2()?;
        if b != b2 {
            return Err(dim_err("batch_outer", format!("batch {b} vs {b2}")));
        }
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = Vec::with_capacity(b * m * d);
        for i in 0..b {
            for k in 0..m {
                out.extend(vd[i * d..(i + 1) * d].iter().map(|x| x * wd[i * m + k]));
            }
        }
        Ok(self.push(GridTensor::matrix(b, m * d, out)?, Op::BatchOuter(w, v)))
    }

    /// Soft class indicators from continuous labels `x[B×L]`:
    /// `out[b, m, l] = softmax_m(−sharpness·(x[b,l] − m)²)`, shape `B×M×L`.
    pub fn soft_masks(&mut self, labels: Var, classes: usize, sharpness: f64) -> Result<Var> {
        let (b, l) = self.value(labels).dims2()?;
        let x = self.value(labels).data();
        let mut out = vec![0.0; b * classes * l];
        let mut logits = vec![0.0; classes];
        for i in 0..b {
            for p in 0..l {
                let xv = x[i * l + p];
                for (m, lg) in logits.iter_mut().enumerate() {
                    *lg = -sharpness * (xv - m as f64).powi(2);
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                for (m, lg) in logits.iter().enumerate() {
                    out[(i * classes + m) * l + p] = (lg - max).exp() / total;
                }
            }
        }
        Ok(self.push(
            GridTensor::new(vec![b, classes, l], out)?,
            Op::SoftMasks {
                labels,
                classes,
                sharpness,
            },
        ))
    }

    /// Scaled dot-product attention over `groups` independent blocks of
    /// `rows` rows each. `q`, `k`, `v` are `(groups·rows)×D`; columns are split
    /// into `heads` slices of width `D / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, rows: usize, heads: usize) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        if n != groups * rows {
            return Err(dim_err("attention", format!("{n} rows vs {groups}×{rows}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        check_same("attention", self.value(q), self.value(k))?;
        check_same("attention", self.value(q), self.value(v))?;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; groups * heads * rows * rows];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * rows * rows..][..rows * rows];
                for i in 0..rows {
                    let qi = &qd[(g * rows + i) * d + h * dk..][..dk];
                    for j in 0..rows {
                        let kj = &kd[(g * rows + j) * d + h * dk..][..dk];
                        p[i * rows + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let row = &mut p[i * rows..(i + 1) * rows];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                    for j in 0..rows {
                        let w = p[i * rows + j];
                        let vj = &vd[(g * rows + j) * d + h * dk..][..dk];
                        let oi = &mut out[(g * rows + i) * d + h * dk..][..dk];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            GridTensor::matrix(n, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                groups,
                rows,
                heads,
                probs,
            },
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(dim_err("backward", "output must be a single element"));
        }
        let mut grads: Vec<Option<GridTensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(GridTensor::full(self.value(output).shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &GridTensor, grads: &mut [Option<GridTensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: GridTensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let zip_map = |a: &GridTensor, f: &dyn Fn(f64, f64) -> f64| -> GridTensor {
            let mut out = g.clone();
            for (o, &av) in out.data_mut().iter_mut().zip(a.data()) {
                *o = f(*o, av);
            }
            out
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = val(*a).dims2()?;
                let c = val(*b).dims2()?.1;
                let mut ga = vec![0.0; r * k];
                kernels::matmul_nt_into(g.data(), val(*b).data(), &mut ga, r, c, k);
                let mut gb = vec![0.0; k * c];
                kernels::matmul_tn_into(val(*a).data(), g.data(), &mut gb, r, k, c);
                acc(*a, GridTensor::matrix(r, k, ga)?);
                acc(*b, GridTensor::matrix(k, c, gb)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(val(*b), &|gv, bv| gv * bv));
                acc(*b, zip_map(val(*a), &|gv, av| gv * av));
            }
            Op::AddRow(a, row) => {
                let c = val(*row).numel();
                let mut gr = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                acc(*a, g.clone());
                acc(*row, GridTensor::new(val(*row).shape().to_vec(), gr)?);
            }
            Op::MulRow(a, row) => {
                let r = val(*row).data();
                let c = r.len();
                let mut ga = g.clone();
                let mut gr = vec![0.0; c];
                for (gchunk, achunk) in ga.data_mut().chunks_mut(c).zip(val(*a).data().chunks(c)) {
                    for j in 0..c {
                        gr[j] += gchunk[j] * achunk[j];
                        gchunk[j] *= r[j];
                    }
                }
                acc(*a, ga);
                acc(*row, GridTensor::new(val(*row).shape().to_vec(), gr)?);
            }
            Op::MulConst(a, c) => acc(*a, zip_map(c, &|gv, cv| gv * cv)),
            Op::MulScalarVar(a, s) => {
                let k = val(*s).item();
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                acc(*a, g.map(|v| v * k));
                acc(*s, GridTensor::new(val(*s).shape().to_vec(), vec![gs])?);
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, zip_map(y, &|gv, yv| gv * yv)),
            Op::Log(a) => acc(*a, zip_map(val(*a), &|gv, av| gv / av)),
            Op::Tanh(a) => acc(*a, zip_map(y, &|gv, yv| gv * (1.0 - yv * yv))),
            Op::Gelu(a) => acc(*a, zip_map(val(*a), &|gv, av| gv * kernels::gelu_derivative(av))),
            Op::Square(a) => acc(*a, zip_map(val(*a), &|gv, av| 2.0 * gv * av)),
            Op::Powf(a, p) => {
                let p = *p;
                acc(*a, zip_map(val(*a), &|gv, av| gv * p * av.powf(p - 1.0)));
            }
            Op::Sum(a) => acc(*a, GridTensor::full(val(*a).shape(), g.item())),
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend(g.data().iter().map(|v| v / r as f64));
                }
                acc(*a, GridTensor::matrix(r, c, ga)?);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).dims2()?;
                let mut ga = Vec::with_capacity(r * c);
                for &gv in g.data() {
                    ga.extend(std::iter::repeat_n(gv, c));
                }
                acc(*a, GridTensor::matrix(r, c, ga)?);
            }
            Op::MeanAxis(a, axis) => acc(*a, kernels::mean_axis_backward(val(*a).shape(), *axis, g)?),
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2()?;
                let w = y.dims2()?.1;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*a, GridTensor::matrix(r, c, ga)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = y.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2()?.1;
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, GridTensor::matrix(r, w, gp)?);
                    offset += w;
                }
            }
            Op::Permute(a, perm) => {
                let (r, c) = val(*a).dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &p) in perm.iter().enumerate() {
                        ga[i * c + p] += g.data()[i * c + j];
                    }
                }
                acc(*a, GridTensor::matrix(r, c, ga)?);
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape())?),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                groups,
            } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*input), val(*kernel), g, *stride, *groups)?;
                acc(*input, gx);
                acc(*kernel, gw);
                acc(*bias, gb.reshape(val(*bias).shape())?);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(cache, val(*gamma), g)?;
                acc(*input, gx);
                acc(*gamma, gg.reshape(val(*gamma).shape())?);
                acc(*beta, gb.reshape(val(*beta).shape())?);
            }
            Op::Softmax(a) => acc(*a, kernels::softmax_rows_backward(y, g)),
            Op::GlobalAvgPool(a) => acc(*a, kernels::global_avg_pool_backward(val(*a).shape(), g)?),
            Op::MulChannel(a, gamma) => {
                let [_, c, h, w] = val(*a).shape()[..] else {
                    unreachable!()
                };
                let gm = val(*gamma).data();
                let mut ga = g.clone();
                let mut gg = vec![0.0; c];
                for (i, (gp, ap)) in ga
                    .data_mut()
                    .chunks_mut(h * w)
                    .zip(val(*a).data().chunks(h * w))
                    .enumerate()
                {
                    gg[i % c] += gp.iter().zip(ap).map(|(x, y)| x * y).sum::<f64>();
                    gp.iter_mut().for_each(|v| *v *= gm[i % c]);
                }
                acc(*a, ga);
                acc(*gamma, GridTensor::new(val(*gamma).shape().to_vec(), gg)?);
            }
            Op::BatchOuter(w, v) => {
                let (b, m) = val(*w).dims2()?;
                let d = val(*v).dims2()?.1;
                let (wd, vd) = (val(*w).data(), val(*v).data());
                let mut gw = vec![0.0; b * m];
                let mut gv = vec![0.0; b * d];
                for i in 0..b {
                    for k in 0..m {
                        let gblock = &g.data()[(i * m + k) * d..][..d];
                        gw[i * m + k] = gblock.iter().zip(&vd[i * d..(i + 1) * d]).map(|(x, y)| x * y).sum();
                        for (o, &gx) in gv[i * d..(i + 1) * d].iter_mut().zip(gblock) {
                            *o += gx * wd[i * m + k];
                        }
                    }
                }
                acc(*w, GridTensor::matrix(b, m, gw)?);
                acc(*v, GridTensor::matrix(b, d, gv)?);
            }
            Op::SoftMasks {
                labels,
                classes,
                sharpness,
            } => {
                let (b, l) = val(*labels).dims2()?;
                let x = val(*labels).data();
                let mut gx = vec![0.0; b * l];
                for i in 0..b {
                    for p in 0..l {
                        let at = |m: usize| (i * classes + m) * l + p;
                        let dot: f64 = (0..*classes).map(|m| g.data()[at(m)] * y.data()[at(m)]).sum();
                        gx[i * l + p] = (0..*classes)
                            .map(|m| {
                                let dlogit = y.data()[at(m)] * (g.data()[at(m)] - dot);
                                dlogit * (-2.0 * sharpness * (x[i * l + p] - m as f64))
                            })
                            .sum();
                    }
                }
                acc(*labels, GridTensor::matrix(b, l, gx)?);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                rows,
                heads,
                probs,
            } => {
                let (n, d) = val(*q).dims2()?;
                let (rows, heads) = (*rows, *heads);
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut dp = vec![0.0; rows * rows];
                for gi in 0..*groups {
                    for h in 0..heads {
                        let p = &probs[(gi * heads + h) * rows * rows..][..rows * rows];
                        let at = |r: usize| (gi * rows + r) * d + h * dk;
                        for i in 0..rows {
                            let go = &g.data()[at(i)..at(i) + dk];
                            for j in 0..rows {
                                dp[i * rows + j] = go.iter().zip(&vd[at(j)..at(j) + dk]).map(|(a, b)| a * b).sum();
                                for (o, &gov) in gv[at(j)..at(j) + dk].iter_mut().zip(go) {
                                    *o += p[i * rows + j] * gov;
                                }
                            }
                            let dot: f64 = (0..rows).map(|j| dp[i * rows + j] * p[i * rows + j]).sum();
                            for j in 0..rows {
                                let ds = p[i * rows + j] * (dp[i * rows + j] - dot) * scale;
                                for t in 0..dk {
                                    gq[at(i) + t] += ds * kd[at(j) + t];
                                    gk[at(j) + t] += ds * qd[at(i) + t];
                                }
                            }
                        }
                    }
                }
                acc(*q, GridTensor::matrix(n, d, gq)?);
                acc(*k, GridTensor::matrix(n, d, gk)?);
                acc(*v, GridTensor::matrix(n, d, gv)?);
            }
        }
        Ok(())
    }
}
