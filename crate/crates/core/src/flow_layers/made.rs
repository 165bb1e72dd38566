//! Autoregressive masks and the masked conditioner network.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::gelu_scalar;
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};

/// Binary connectivity masks for a masked autoregressive network.
///
/// Degrees are 1-based: input `j` has degree `j`, output `i` has degree `i`.
/// A hidden unit of degree `m` sees inputs `1..=m` and feeds outputs `> m`, so
/// output `i` depends only on inputs `1..i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeMaskSet {
    pub dim: usize,
    pub hidden_degrees: Vec<Vec<usize>>,
    /// One `fan_in × fan_out` mask per layer; the last maps the final hidden
    /// layer to `2·dim` outputs (scales then shifts).
    pub masks: Vec<GridTensor>,
}

pub fn build_made_masks(dim: usize, hidden_widths: &[usize], seed: u64) -> Result<MadeMaskSet> {
    if dim < 2 {
        return Err(Error::Config(format!("autoregressive dimension {dim} < 2")));
    }
    if hidden_widths.is_empty() || hidden_widths.contains(&0) {
        return Err(Error::Config("autoregressive hidden widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden_degrees: Vec<Vec<usize>> = hidden_widths
        .iter()
        .map(|&w| (0..w).map(|_| rng.random_range(1..dim)).collect())
        .collect();
    let input_degrees: Vec<usize> = (1..=dim).collect();
    let mut masks = Vec::with_capacity(hidden_widths.len() + 1);
    let mut prev = &input_degrees;
    for degs in &hidden_degrees {
        masks.push(GridTensor::from_fn(&[prev.len(), degs.len()], |idx| {
            let (r, c) = (idx / degs.len(), idx % degs.len());
            (degs[c] >= prev[r]) as u8 as f64
        }));
        prev = degs;
    }
    let out_w = 2 * dim;
    masks.push(GridTensor::from_fn(&[prev.len(), out_w], |idx| {
        let (r, c) = (idx / out_w, idx % out_w);
        let out_degree = c % dim + 1;
        (out_degree > prev[r]) as u8 as f64
    }));
    Ok(MadeMaskSet {
        dim,
        hidden_degrees,
        masks,
    })
}

/// Masked network producing per-coordinate `(s_i, b_i)` from the preceding
/// coordinates, optionally with an unmasked conditioning input injected into
/// every hidden layer.
#[derive(Debug)]
pub struct MadeNet {
    prefix: String,
    masks: MadeMaskSet,
    cond_dim: usize,
    clamp: f64,
    evaluations: AtomicUsize,
}

impl Clone for MadeNet {
    fn clone(&self) -> Self {
        Self {
            prefix: self.prefix.clone(),
            masks: self.masks.clone(),
            cond_dim: self.cond_dim,
            clamp: self.clamp,
            evaluations: AtomicUsize::new(0),
        }
    }
}

impl MadeNet {
    /// Registers parameters under `prefix`; the output layer starts at zero.
    pub fn init(
        prefix: &str,
        masks: MadeMaskSet,
        cond_dim: usize,
        clamp: f64,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = masks.masks.len();
        for (l, m) in masks.masks.iter().enumerate() {
            let (fan_in, fan_out) = m.dims2()?;
            let w = format!("{prefix}.l{l}.weight");
            if l + 1 == layers {
                store.insert(w, GridTensor::zeros(&[fan_in, fan_out]))?;
            } else {
                store.insert_normal(w, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?;
                if cond_dim > 0 {
                    store.insert_normal(
                        format!("{prefix}.l{l}.cond_weight"),
                        &[cond_dim, fan_out],
                        1.0 / (cond_dim as f64).sqrt(),
                        rng,
                    )?;
                }
            }
            store.insert(format!("{prefix}.l{l}.bias"), GridTensor::zeros(&[1, fan_out]))?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            masks,
            cond_dim,
            clamp,
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.masks.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn masks(&self) -> &MadeMaskSet {
        &self.masks
    }

    /// Number of conditioner evaluations since the last reset. A vectorized
    /// pass over a batch counts once; each step of a sequential inversion
    /// counts once.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    fn name(&self, l: usize, what: &str) -> String {
        format!("{}.l{l}.{what}", self.prefix)
    }

    fn check_cond(&self, cond_width: Option<usize>) -> Result<()> {
        match (self.cond_dim, cond_width) {
            (0, None) => Ok(()),
            (d, Some(w)) if d == w => Ok(()),
            (d, w) => Err(Error::Config(format!(
                "{}: conditioning width {w:?} does not match configured {d}",
                self.prefix
            ))),
        }
    }

    /// One vectorized pass: `(s, b)`, each `B×d`.
    pub fn scale_shift(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        input: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (_, d) = tape.value(input).dims2()?;
        if d != self.dim() {
            return Err(Error::Config(format!(
                "{}: input width {d} vs mask dimension {}",
                self.prefix,
                self.dim()
            )));
        }
        self.check_cond(cond.map(|c| tape.value(c).shape()[1]))?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let layers = self.masks.masks.len();
        let mut h = input;
        for l in 0..layers {
            let w = tape.param(&self.name(l, "weight"), store.get(&self.name(l, "weight"))?);
            let w = tape.mul_const(w, self.masks.masks[l].clone())?;
            let b = tape.param(&self.name(l, "bias"), store.get(&self.name(l, "bias"))?);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < layers {
                if let Some(c) = cond {
                    let cw = tape.param(&self.name(l, "cond_weight"), store.get(&self.name(l, "cond_weight"))?);
                    let ch = tape.matmul(c, cw)?;
                    h = tape.add(h, ch)?;
                }
                h = tape.gelu(h);
            }
        }
        let s = tape.slice_cols(h, 0, d)?;
        let s = tape.soft_clamp(s, self.clamp);
        let b = tape.slice_cols(h, d, 2 * d)?;
        Ok((s, b))
    }

    /// Sequential inversion of `y_i = x_i·exp(s_i(x_<i)) + b_i(x_<i)` for one
    /// sample. The first hidden layer's pre-activation is updated
    /// incrementally as each coordinate is recovered; deeper layers and the
    /// output unit for coordinate `i` are evaluated once per step.
    pub fn invert_sequential(&self, store: &ParameterStore, y: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::Config(format!(
                "{}: input width {} vs mask dimension {d}",
                self.prefix,
                y.len()
            )));
        }
        self.check_cond(cond.map(<[f64]>::len))?;
        let layers = self.masks.masks.len();
        let masked: Vec<Vec<f64>> = (0..layers)
            .map(|l| {
                let w = store.get(&self.name(l, "weight"))?;
                Ok(w.data()
                    .iter()
                    .zip(self.masks.masks[l].data())
                    .map(|(a, m)| a * m)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let widths: Vec<usize> = self.masks.masks.iter().map(|m| m.shape()[1]).collect();
        // Constant contributions: bias plus conditioning for every hidden layer.
        let mut base: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut v = store.get(&self.name(l, "bias"))?.data().to_vec();
            if let (Some(c), true) = (cond, l + 1 < layers) {
                let cw = store.get(&self.name(l, "cond_weight"))?.data();
                for (k, &cv) in c.iter().enumerate() {
                    for (o, &wv) in v.iter_mut().zip(&cw[k * widths[l]..(k + 1) * widths[l]]) {
                        *o += cv * wv;
                    }
                }
            }
            base.push(v);
        }
        let mut first = base[0].clone();
        let mut x = vec![0.0; d];
        let out_w = widths[layers - 1];
        for i in 0..d {
            self.evaluations.fetch_add(1, Ordering::Relaxed);
            let mut h: Vec<f64> = first.iter().map(|&a| gelu_scalar(a)).collect();
            for l in 1..layers - 1 {
                let mut a = base[l].clone();
                let w = &masked[l];
                for (k, &hv) in h.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    for (o, &wv) in a.iter_mut().zip(&w[k * widths[l]..(k + 1) * widths[l]]) {
                        *o += hv * wv;
                    }
                }
                h = a.into_iter().map(gelu_scalar).collect();
            }
            let w = &masked[layers - 1];
            let out_bias = &base[layers - 1];
            let mut s = out_bias[i];
            let mut b = out_bias[d + i];
            for (k, &hv) in h.iter().enumerate() {
                s += hv * w[k * out_w + i];
                b += hv * w[k * out_w + d + i];
            }
            let s = self.clamp * (s / self.clamp).tanh();
            x[i] = (y[i] - b) * (-s).exp();
            let w0 = &masked[0];
            for (o, &wv) in first.iter_mut().zip(&w0[i * widths[0]..(i + 1) * widths[0]]) {
                *o += x[i] * wv;
            }
        }
        Ok(x)
    }
}
