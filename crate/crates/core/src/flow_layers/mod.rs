//! Invertible layers with exact log-determinant accounting.
//!
//! "Forward" always means the data → latent direction used for density
//! evaluation; each forward pass reports `log|det ∂y/∂x|` per sample.
//! "Inverse" is the latent → data direction used for sampling.

mod autoregressive;
mod batchnorm;
mod conditioner;
mod coupling;
mod made;
mod stack;

pub use autoregressive::MaskedAutoregressive;
pub use batchnorm::{BatchNormLayer, BatchNormStats, BatchStats};
pub use conditioner::{ConditionerNet, DEFAULT_CLAMP};
pub use coupling::{AffineCoupling, ConditionProjection};
pub use made::{build_made_masks, MadeMaskSet, MadeNet};
pub use stack::{gaussian_nll, mean_loss_checked, FlowStack, LayerStats, StackForward, TraceGranularity, TraceStep};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// One sample's flattened flow variable and the log-determinant accumulated
/// so far.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub vector: GridTensor,
    pub accumulated_logdet: f64,
}

impl FlowState {
    pub fn new(vector: GridTensor) -> Self {
        Self {
            vector,
            accumulated_logdet: 0.0,
        }
    }
}

/// Per-call context shared by every layer of a stack.
#[derive(Clone, Copy)]
pub struct LayerContext<'a> {
    pub store: &'a ParameterStore,
    /// `B×D` conditioning input, when the layer uses one.
    pub cond: Option<Var>,
    pub mode: Mode,
}

/// Result of a batched forward pass through one layer.
#[derive(Debug)]
pub struct LayerForward {
    pub output: Var,
    /// `B×1` log-determinant, absent for volume-preserving layers.
    pub logdet: Option<Var>,
    /// Batch statistics observed by a train-mode batch-norm layer.
    pub stats: Option<BatchStats>,
}

/// Fixed coordinate permutation; output column `j` takes input `perm[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Permutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(Error::Config(format!("not a permutation: {perm:?}")));
            }
            inverse[p] = j;
        }
        Ok(Self { perm, inverse })
    }

    /// Swaps the first and second halves.
    pub fn half_swap(dim: usize) -> Result<Self> {
        let half = dim / 2;
        Self::new((half..dim).chain(0..half).collect())
    }

    pub fn reversal(dim: usize) -> Result<Self> {
        Self::new((0..dim).rev().collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }
}

/// Layer kinds, used to label generation traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Coupling,
    ConditionProjection,
    BatchNorm,
    MaskedAutoregressive,
    UnconditionalAutoregressive,
    Permutation,
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Coupling(AffineCoupling),
    ConditionProjection(ConditionProjection),
    BatchNorm(BatchNormLayer),
    Autoregressive(MaskedAutoregressive),
    Permutation(Permutation),
}

impl FlowLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayer::Coupling(_) => LayerKind::Coupling,
            FlowLayer::ConditionProjection(_) => LayerKind::ConditionProjection,
            FlowLayer::BatchNorm(_) => LayerKind::BatchNorm,
            FlowLayer::Autoregressive(l) if l.is_conditional() => LayerKind::MaskedAutoregressive,
            FlowLayer::Autoregressive(_) => LayerKind::UnconditionalAutoregressive,
            FlowLayer::Permutation(_) => LayerKind::Permutation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<LayerForward> {
        match self {
            FlowLayer::Coupling(l) => l.forward(tape, ctx, x),
            FlowLayer::ConditionProjection(l) => l.forward(tape, ctx, x),
            FlowLayer::BatchNorm(l) => l.forward(tape, ctx, x),
            FlowLayer::Autoregressive(l) => l.forward(tape, ctx, x),
            FlowLayer::Permutation(p) => Ok(LayerForward {
                output: tape.permute_cols(x, p.indices())?,
                logdet: None,
                stats: None,
            }),
        }
    }

    /// Differentiable inverse. Autoregressive layers invert sequentially
    /// outside the tape and reject this call.
    pub fn inverse(&self, tape: &mut Tape, ctx: &LayerContext, y: Var) -> Result<Var> {
        match self {
            FlowLayer::Coupling(l) => l.inverse(tape, ctx, y),
            FlowLayer::ConditionProjection(l) => l.inverse(tape, ctx, y),
            FlowLayer::BatchNorm(l) => l.inverse(tape, ctx, y),
            FlowLayer::Autoregressive(_) => Err(Error::Config(
                "autoregressive layers invert sequentially; use inverse_values".into(),
            )),
            FlowLayer::Permutation(p) => tape.permute_cols(y, p.inverse_indices()),
        }
    }

    /// Eval-mode inverse on plain values; `y` is `B×d`, `cond` is `B×D`.
    pub fn inverse_values(
        &self,
        store: &ParameterStore,
        y: &GridTensor,
        cond: Option<&GridTensor>,
    ) -> Result<GridTensor> {
        if let FlowLayer::Autoregressive(l) = self {
            return l.inverse_values(store, y, cond);
        }
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let ctx = LayerContext {
            store,
            cond: cv,
            mode: Mode::Eval,
        };
        let x = self.inverse(&mut tape, &ctx, yv)?;
        Ok(tape.value(x).clone())
    }

    /// Eval-mode forward on plain values, returning outputs and per-sample
    /// log-determinants.
    pub fn forward_values(
        &self,
        store: &ParameterStore,
        x: &GridTensor,
        cond: Option<&GridTensor>,
    ) -> Result<(GridTensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let ctx = LayerContext {
            store,
            cond: cv,
            mode: Mode::Eval,
        };
        let out = self.forward(&mut tape, &ctx, xv)?;
        let rows = x.dims2()?.0;
        let logdet = match out.logdet {
            Some(l) => tape.value(l).data().to_vec(),
            None => vec![0.0; rows],
        };
        Ok((tape.value(out.output).clone(), logdet))
    }

    /// Single-sample application in eval mode. The forward direction adds
    /// this layer's log-determinant to the state; the inverse leaves it as is.
    pub fn apply(
        &self,
        store: &ParameterStore,
        state: &FlowState,
        cond: Option<&GridTensor>,
        direction: Direction,
    ) -> Result<FlowState> {
        let d = state.vector.numel();
        let x = state.vector.clone().reshape(&[1, d])?;
        let cond = match cond {
            Some(c) => Some(c.clone().reshape(&[1, c.numel()])?),
            None => None,
        };
        match direction {
            Direction::Forward => {
                let (y, ld) = self.forward_values(store, &x, cond.as_ref())?;
                Ok(FlowState {
                    vector: y.reshape(&[d])?,
                    accumulated_logdet: state.accumulated_logdet + ld[0],
                })
            }
            Direction::Inverse => Ok(FlowState {
                vector: self.inverse_values(store, &x, cond.as_ref())?.reshape(&[d])?,
                accumulated_logdet: state.accumulated_logdet,
            }),
        }
    }
}

/// Applies a batch-norm layer to a batch of states. Train mode normalizes
/// with batch statistics and folds them into the running estimates; eval
/// mode uses the running estimates. Inversion is only defined in eval mode.
pub fn batchnorm_apply(
    layer: &mut BatchNormLayer,
    batch: &[FlowState],
    direction: Direction,
    mode: Mode,
) -> Result<Vec<FlowState>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let d = batch[0].vector.numel();
    let mut flat = Vec::with_capacity(batch.len() * d);
    for s in batch {
        if s.vector.numel() != d {
            return Err(Error::Config("ragged batch".into()));
        }
        flat.extend_from_slice(s.vector.data());
    }
    let x = GridTensor::matrix(batch.len(), d, flat)?;
    let store = ParameterStore::new();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let ctx = LayerContext {
        store: &store,
        cond: None,
        mode,
    };
    let (out, logdet) = match direction {
        Direction::Forward => {
            let f = layer.forward(&mut tape, &ctx, xv)?;
            if let Some(stats) = &f.stats {
                layer.stats.update(stats);
            }
            (f.output, f.logdet.map(|l| tape.value(l).data().to_vec()))
        }
        Direction::Inverse => (layer.inverse(&mut tape, &ctx, xv)?, None),
    };
    let y = tape.value(out);
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, s)| FlowState {
            vector: GridTensor::vector(y.row(i).to_vec()),
            accumulated_logdet: s.accumulated_logdet + logdet.as_ref().map_or(0.0, |l| l[i]),
        })
        .collect())
}
