use rand::Rng;

use super::{ConditionerNet, LayerContext, LayerForward};
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tape, Var};

fn halves(dim: usize, what: &str) -> Result<usize> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("{what} needs an even dimension, got {dim}")));
    }
    Ok(dim / 2)
}

fn split(tape: &mut Tape, x: Var, dim: usize) -> Result<(Var, Var)> {
    let (_, d) = tape.value(x).dims2()?;
    if d != dim {
        return Err(Error::Config(format!("layer built for dimension {dim}, got {d}")));
    }
    let half = dim / 2;
    Ok((tape.slice_cols(x, 0, half)?, tape.slice_cols(x, half, dim)?))
}

/// `y₂ = exp(s)·x₂ + b` on the second half, then `y = [x₁ | y₂]`.
fn affine_forward(tape: &mut Tape, x1: Var, x2: Var, s: Var, b: Var) -> Result<LayerForward> {
    let scale = tape.exp(s);
    let y2 = tape.mul(scale, x2)?;
    let y2 = tape.add(y2, b)?;
    Ok(LayerForward {
        output: tape.concat_cols(&[x1, y2])?,
        logdet: Some(tape.sum_cols(s)?),
        stats: None,
    })
}

/// `x₂ = exp(−s)·(y₂ − b)`.
fn affine_inverse(tape: &mut Tape, y1: Var, y2: Var, s: Var, b: Var) -> Result<Var> {
    let neg = tape.scale(s, -1.0);
    let inv_scale = tape.exp(neg);
    let centered = tape.sub(y2, b)?;
    let x2 = tape.mul(inv_scale, centered)?;
    tape.concat_cols(&[y1, x2])
}

/// Conditional affine coupling: the second half is scaled and shifted by a
/// network of the first half and the conditioning vector.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    dim: usize,
    cond_dim: usize,
    net: ConditionerNet,
}

impl AffineCoupling {
    pub fn init(
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        clamp: f64,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let half = halves(dim, "coupling")?;
        let net = ConditionerNet::init(prefix, half + cond_dim, hidden, half, clamp, store, rng)?;
        Ok(Self { dim, cond_dim, net })
    }

    pub fn net(&self) -> &ConditionerNet {
        &self.net
    }

    fn scale_shift(&self, tape: &mut Tape, ctx: &LayerContext, x1: Var) -> Result<(Var, Var)> {
        let input = match (self.cond_dim, ctx.cond) {
            (0, _) => x1,
            (_, Some(c)) => tape.concat_cols(&[x1, c])?,
            (_, None) => return Err(Error::Config("coupling layer needs a conditioning vector".into())),
        };
        self.net.scale_shift(tape, ctx.store, input)
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<LayerForward> {
        let (x1, x2) = split(tape, x, self.dim)?;
        let (s, b) = self.scale_shift(tape, ctx, x1)?;
        affine_forward(tape, x1, x2, s, b)
    }

    pub fn inverse(&self, tape: &mut Tape, ctx: &LayerContext, y: Var) -> Result<Var> {
        let (y1, y2) = split(tape, y, self.dim)?;
        let (s, b) = self.scale_shift(tape, ctx, y1)?;
        affine_inverse(tape, y1, y2, s, b)
    }
}

/// Like [`AffineCoupling`], but the scale and shift depend only on the
/// conditioning vector, so the log-determinant is constant in the input.
#[derive(Clone, Debug)]
pub struct ConditionProjection {
    dim: usize,
    net: ConditionerNet,
}

impl ConditionProjection {
    pub fn init(
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        clamp: f64,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let half = halves(dim, "condition projection")?;
        let net = ConditionerNet::init(prefix, cond_dim, hidden, half, clamp, store, rng)?;
        Ok(Self { dim, net })
    }

    pub fn net(&self) -> &ConditionerNet {
        &self.net
    }

    fn scale_shift(&self, tape: &mut Tape, ctx: &LayerContext) -> Result<(Var, Var)> {
        let cond = ctx
            .cond
            .ok_or_else(|| Error::Config("condition projection needs a conditioning vector".into()))?;
        self.net.scale_shift(tape, ctx.store, cond)
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<LayerForward> {
        let (x1, x2) = split(tape, x, self.dim)?;
        let (s, b) = self.scale_shift(tape, ctx)?;
        affine_forward(tape, x1, x2, s, b)
    }

    pub fn inverse(&self, tape: &mut Tape, ctx: &LayerContext, y: Var) -> Result<Var> {
        let (y1, y2) = split(tape, y, self.dim)?;
        let (s, b) = self.scale_shift(tape, ctx)?;
        affine_inverse(tape, y1, y2, s, b)
    }
}
