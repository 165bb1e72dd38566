use std::f64::consts::PI;

use super::{BatchStats, FlowLayer, LayerContext, LayerKind, Mode, Permutation};
use crate::error::{Error, Result};
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};

/// How densely an inverse pass records its intermediate states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceGranularity {
    /// One state after each block.
    Block,
    /// One state after each non-permutation layer; permutations are folded
    /// into the following step.
    Layer,
}

/// One recorded state of an inverse (generation) pass. The state is always
/// stored in the data's variable order, whatever permutations are pending.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// Index of the layer just inverted; `None` for the latent draw.
    pub layer_index: Option<usize>,
    pub kind: Option<LayerKind>,
    pub state: GridTensor,
}

/// Result of a batched forward pass through a whole stack.
/// Batch statistics keyed by layer index.
pub type LayerStats = Vec<(usize, BatchStats)>;

#[derive(Debug)]
pub struct StackForward {
    pub output: Var,
    /// `B×1` total log-determinant.
    pub logdet: Var,
    /// Output of every layer, for locating non-finite values.
    pub layer_outputs: Vec<Var>,
    /// Empty outside train mode.
    pub stats: LayerStats,
}

/// Ordered composition of invertible layers, grouped into blocks.
#[derive(Clone, Debug)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<FlowLayer>,
    block_of: Vec<usize>,
    /// `orders[i][j]`: data coordinate held in slot `j` of the input to layer `i`.
    orders: Vec<Vec<usize>>,
}

impl FlowStack {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
            block_of: Vec::new(),
            orders: vec![(0..dim).collect()],
        }
    }

    /// Appends a layer to block `block`. Blocks must be appended in order.
    pub fn push(&mut self, layer: FlowLayer, block: usize) {
        let last = self.orders.last().expect("orders never empty").clone();
        let next = match &layer {
            FlowLayer::Permutation(p) => p.indices().iter().map(|&i| last[i]).collect(),
            _ => last,
        };
        self.orders.push(next);
        self.layers.push(layer);
        self.block_of.push(block);
    }

    /// Appends a permutation restoring data order, so latent coordinates
    /// line up with data coordinates. No-op when already in data order.
    pub fn close_order(&mut self) -> Result<()> {
        let last = self.orders.last().expect("orders never empty");
        if last.iter().enumerate().all(|(j, &c)| j == c) {
            return Ok(());
        }
        let mut perm = vec![0; self.dim];
        for (slot, &coord) in last.iter().enumerate() {
            perm[coord] = slot;
        }
        let block = self.block_of.last().copied().unwrap_or(0);
        self.push(FlowLayer::Permutation(Permutation::new(perm)?), block);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn block_of(&self, layer: usize) -> usize {
        self.block_of[layer]
    }

    pub fn blocks(&self) -> usize {
        self.block_of.last().map_or(0, |b| b + 1)
    }

    /// Number of non-permutation layers.
    pub fn depth(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !matches!(l, FlowLayer::Permutation(_)))
            .count()
    }

    fn check_width(&self, rows_cols: (usize, usize)) -> Result<()> {
        if rows_cols.1 != self.dim {
            return Err(Error::Config(format!(
                "flow built for dimension {}, got {}",
                self.dim, rows_cols.1
            )));
        }
        Ok(())
    }

    /// Data → latent on a tape, summing log-determinants.
    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<StackForward> {
        let (rows, d) = tape.value(x).dims2()?;
        self.check_width((rows, d))?;
        let mut h = x;
        let mut logdet = tape.constant(GridTensor::zeros(&[rows, 1]));
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(tape, ctx, h)?;
            h = out.output;
            if let Some(l) = out.logdet {
                logdet = tape.add(logdet, l)?;
            }
            if let Some(s) = out.stats {
                stats.push((i, s));
            }
            layer_outputs.push(h);
        }
        Ok(StackForward {
            output: h,
            logdet,
            layer_outputs,
            stats,
        })
    }

    /// Differentiable latent → data pass (eval mode). Fails on stacks with
    /// autoregressive layers, which only invert sequentially.
    pub fn inverse(&self, tape: &mut Tape, ctx: &LayerContext, z: Var) -> Result<Var> {
        self.check_width(tape.value(z).dims2()?)?;
        let mut h = z;
        for layer in self.layers.iter().rev() {
            h = layer.inverse(tape, ctx, h)?;
        }
        Ok(h)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_stats(&mut self, stats: &[(usize, BatchStats)]) -> Result<()> {
        for (i, s) in stats {
            match self.layers.get_mut(*i) {
                Some(FlowLayer::BatchNorm(bn)) => bn.stats.update(s),
                _ => return Err(Error::Config(format!("layer {i} is not a batch-norm layer"))),
            }
        }
        Ok(())
    }

    /// Eval-mode forward on plain values: `(z, per-sample log-det)`.
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
        Ok((tape.value(out.output).clone(), tape.value(out.logdet).data().to_vec()))
    }

    /// Eval-mode latent → data on plain values for a `B×d` batch.
    pub fn inverse_values(
        &self,
        store: &ParameterStore,
        z: &GridTensor,
        cond: Option<&GridTensor>,
    ) -> Result<GridTensor> {
        self.check_width(z.dims2()?)?;
        let mut h = z.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.inverse_values(store, &h, cond)?;
            if !h.is_finite() {
                return Err(Error::Sampling {
                    layer: i,
                    detail: format!("non-finite state after inverting {:?}", layer.kind()),
                });
            }
        }
        Ok(h)
    }

    /// Single-sample inverse that records intermediate states. The first step
    /// is the latent itself; the last is the returned data-space vector.
    pub fn inverse_traced(
        &self,
        store: &ParameterStore,
        z: &GridTensor,
        cond: Option<&GridTensor>,
        granularity: TraceGranularity,
    ) -> Result<(GridTensor, Vec<TraceStep>)> {
        let mut h = z.clone().reshape(&[1, self.dim])?;
        let cond = match cond {
            Some(c) => Some(c.clone().reshape(&[1, c.numel()])?),
            None => None,
        };
        let mut steps = vec![TraceStep {
            layer_index: None,
            kind: None,
            state: self.canonical(h.data(), self.layers.len()),
        }];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.inverse_values(store, &h, cond.as_ref())?;
            if !h.is_finite() {
                return Err(Error::Sampling {
                    layer: i,
                    detail: format!("non-finite state after inverting {:?}", layer.kind()),
                });
            }
            let record = match granularity {
                TraceGranularity::Layer => !matches!(layer, FlowLayer::Permutation(_)),
                TraceGranularity::Block => i == 0 || self.block_of[i - 1] != self.block_of[i],
            };
            if record {
                steps.push(TraceStep {
                    layer_index: Some(i),
                    kind: Some(layer.kind()),
                    state: self.canonical(h.data(), i),
                });
            }
        }
        let d = self.dim;
        Ok((h.reshape(&[d])?, steps))
    }

    /// Reorders the input of layer `at` into data order.
    fn canonical(&self, state: &[f64], at: usize) -> GridTensor {
        let mut out = vec![0.0; self.dim];
        for (slot, &coord) in self.orders[at].iter().enumerate() {
            out[coord] = state[slot];
        }
        GridTensor::vector(out)
    }
}

/// Per-sample negative log-likelihood under a standard normal base,
/// `½(‖z‖² + d·ln 2π) − logdet`, as a `B×1` node.
pub fn gaussian_nll(tape: &mut Tape, z: Var, logdet: Var) -> Result<Var> {
    let (_, d) = tape.value(z).dims2()?;
    let sq = tape.square(z);
    let sq = tape.sum_cols(sq)?;
    let half = tape.scale(sq, 0.5);
    let base = tape.add_scalar(half, 0.5 * d as f64 * (2.0 * PI).ln());
    tape.sub(base, logdet)
}

/// Mean of a `B×1` per-sample loss, raising a training fault that names the
/// first non-finite sample and, when possible, the first layer whose output
/// went non-finite for it.
pub fn mean_loss_checked(tape: &mut Tape, per_sample: Var, layer_outputs: &[Var]) -> Result<Var> {
    let values = tape.value(per_sample).data();
    if let Some(sample) = values.iter().position(|v| !v.is_finite()) {
        let layer = layer_outputs
            .iter()
            .position(|&o| tape.value(o).row(sample).iter().any(|v| !v.is_finite()));
        return Err(Error::Training {
            sample,
            layer,
            detail: format!("non-finite loss {}", values[sample]),
        });
    }
    let rows = values.len() as f64;
    let total = tape.sum(per_sample);
    Ok(tape.scale(total, 1.0 / rows))
}
