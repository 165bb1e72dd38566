//! Stage 1: conditional flow over functional-zone maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flow_layers::{
    gaussian_nll, mean_loss_checked, AffineCoupling, BatchNormLayer, ConditionProjection, FlowLayer, FlowStack,
    LayerContext, LayerStats, Mode, Permutation, StackForward, TraceGranularity, TraceStep, DEFAULT_CLAMP,
};
use crate::numerics::{GridTensor, ParamGrads, ParameterStore, Tape, Var};
use crate::optim::{clip_grad_norm, Adam, DEFAULT_CLIP};

/// `N×N` grid of zone-type labels in `0..M`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZoneMap {
    n: usize,
    labels: Vec<usize>,
}

impl ZoneMap {
    pub fn new(n: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("zone map side {n} < 2")));
        }
        if labels.len() != n * n {
            return Err(Error::Data(format!(
                "zone map of side {n} needs {} labels, got {}",
                n * n,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("zone label {bad} outside 0..{classes}")));
        }
        Ok(Self { n, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.n + col]
    }
}

/// `(label + u)/M − 0.5` for caller-supplied noise `u ∈ [0, 1)`.
pub fn dequantize_zone_with(zm: &ZoneMap, classes: usize, noise: &[f64]) -> Result<GridTensor> {
    if noise.len() != zm.labels.len() {
        return Err(Error::Data(format!(
            "{} noise values for {} cells",
            noise.len(),
            zm.labels.len()
        )));
    }
    let m = classes as f64;
    Ok(GridTensor::vector(
        zm.labels
            .iter()
            .zip(noise)
            .map(|(&l, &u)| (l as f64 + u) / m - 0.5)
            .collect(),
    ))
}

pub fn dequantize_zone(zm: &ZoneMap, classes: usize, rng: &mut impl Rng) -> GridTensor {
    let noise: Vec<f64> = (0..zm.labels.len()).map(|_| rng.random::<f64>()).collect();
    dequantize_zone_with(zm, classes, &noise).expect("noise length matches")
}

pub fn quantize_zone_value(v: f64, classes: usize) -> usize {
    ((v + 0.5) * classes as f64).floor().clamp(0.0, (classes - 1) as f64) as usize
}

pub fn quantize_zone(v: &GridTensor, classes: usize) -> Result<ZoneMap> {
    let n = grid_side(v.numel())?;
    ZoneMap::new(
        n,
        v.data().iter().map(|&x| quantize_zone_value(x, classes)).collect(),
        classes,
    )
}

/// Side length of a square grid with `cells` cells.
pub fn grid_side(cells: usize) -> Result<usize> {
    let n = (cells as f64).sqrt().round() as usize;
    if n * n != cells {
        return Err(Error::Config(format!("{cells} cells do not form a square grid")));
    }
    Ok(n)
}

/// Dequantizes a batch of maps into a `B×N²` matrix.
pub fn dequantize_zone_batch(maps: &[&ZoneMap], classes: usize, rng: &mut impl Rng) -> Result<GridTensor> {
    let d = maps
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .labels
        .len();
    let mut data = Vec::with_capacity(maps.len() * d);
    for m in maps {
        data.extend(dequantize_zone(m, classes, rng).into_data());
    }
    GridTensor::matrix(maps.len(), d, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoneFlowSettings {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub clamp: f64,
    /// Ablation switch for the condition-projection layers.
    pub condition_projection: bool,
}

impl Default for ZoneFlowSettings {
    fn default() -> Self {
        Self {
            blocks: 6,
            hidden: vec![64, 64],
            clamp: DEFAULT_CLAMP,
            condition_projection: true,
        }
    }
}

/// A draw from the zone flow.
#[derive(Clone, Debug)]
pub struct ZoneSample {
    pub map: ZoneMap,
    /// Continuous pre-quantization vector.
    pub vector: GridTensor,
    pub trace: Option<Vec<TraceStep>>,
}

/// Blocks of coupling → condition projection → batch norm, with a half
/// swap between consecutive blocks. Parameters live under `zone.`.
#[derive(Clone, Debug)]
pub struct ZoneFlowModel {
    classes: usize,
    cond_dim: usize,
    stack: FlowStack,
    pub params: ParameterStore,
}

impl ZoneFlowModel {
    pub fn new(
        dim: usize,
        cond_dim: usize,
        classes: usize,
        settings: &ZoneFlowSettings,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if settings.blocks == 0 {
            return Err(Error::Config("zone flow needs at least one block".into()));
        }
        if classes < 2 {
            return Err(Error::Config(format!(
                "zone flow needs at least 2 classes, got {classes}"
            )));
        }
        let mut params = ParameterStore::new();
        let mut stack = FlowStack::new(dim);
        for k in 0..settings.blocks {
            let c = AffineCoupling::init(
                &format!("zone.b{k}.coupling"),
                dim,
                cond_dim,
                &settings.hidden,
                settings.clamp,
                &mut params,
                rng,
            )?;
            stack.push(FlowLayer::Coupling(c), k);
            if settings.condition_projection {
                let p = ConditionProjection::init(
                    &format!("zone.b{k}.projection"),
                    dim,
                    cond_dim,
                    &settings.hidden,
                    settings.clamp,
                    &mut params,
                    rng,
                )?;
                stack.push(FlowLayer::ConditionProjection(p), k);
            }
            stack.push(FlowLayer::BatchNorm(BatchNormLayer::new(dim)), k);
            if k + 1 < settings.blocks {
                stack.push(FlowLayer::Permutation(Permutation::half_swap(dim)?), k);
            }
        }
        stack.close_order()?;
        Ok(Self {
            classes,
            cond_dim,
            stack,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.stack.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn stack(&self) -> &FlowStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut FlowStack {
        &mut self.stack
    }

    fn context<'a>(&'a self, cond: Var, mode: Mode) -> LayerContext<'a> {
        LayerContext {
            store: &self.params,
            cond: Some(cond),
            mode,
        }
    }

    /// Forward pass and mean NLL on `tape` for `x` (`B×d`) under conditions `e` (`B×D`).
    pub fn nll_on_tape(&self, tape: &mut Tape, x: Var, e: Var, mode: Mode) -> Result<(Var, StackForward)> {
        let fwd = self.stack.forward(tape, &self.context(e, mode), x)?;
        let per_sample = gaussian_nll(tape, fwd.output, fwd.logdet)?;
        let mean = mean_loss_checked(tape, per_sample, &fwd.layer_outputs)?;
        Ok((mean, fwd))
    }

    /// Mean NLL of dequantized vectors `x` (`B×d`) given `e` (`B×D`). Does not
    /// touch the running statistics.
    pub fn zone_nll(&self, x: &GridTensor, e: &GridTensor, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = tape.constant(e.clone());
        let (loss, _) = self.nll_on_tape(&mut tape, xv, ev, mode)?;
        Ok(tape.value(loss).item())
    }

    /// Per-sample eval-mode log-density.
    pub fn log_density(&self, x: &GridTensor, e: &GridTensor) -> Result<Vec<f64>> {
        let (z, logdet) = self.stack.forward_values(&self.params, x, Some(e))?;
        let d = self.dim() as f64;
        let (rows, _) = z.dims2()?;
        Ok((0..rows)
            .map(|r| {
                let sq: f64 = z.row(r).iter().map(|v| v * v).sum();
                -0.5 * (sq + d * (2.0 * std::f64::consts::PI).ln()) + logdet[r]
            })
            .collect())
    }

    /// Gradients of the train-mode NLL plus the batch statistics it observed.
    pub fn nll_gradients(&self, x: &GridTensor, e: &GridTensor) -> Result<(f64, ParamGrads, LayerStats)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ev = tape.constant(e.clone());
        let (loss, fwd) = self.nll_on_tape(&mut tape, xv, ev, Mode::Train)?;
        let grads = tape.backward(loss)?.params();
        let value = tape.value(loss).item();
        Ok((value, grads, fwd.stats))
    }

    /// One optimizer step on a batch; returns the pre-step train-mode NLL.
    pub fn train_step(&mut self, opt: &mut Adam, x: &GridTensor, e: &GridTensor) -> Result<f64> {
        let (loss, mut grads, stats) = self.nll_gradients(x, e)?;
        if !grads.is_finite() {
            return Err(Error::Training {
                sample: 0,
                layer: None,
                detail: "non-finite gradient".into(),
            });
        }
        clip_grad_norm(&mut grads, DEFAULT_CLIP);
        opt.begin_step();
        opt.update(&mut self.params, &grads, 1.0)?;
        self.stack.apply_stats(&stats)?;
        Ok(loss)
    }

    /// Differentiable eval-mode inverse, used when stage 2 back-propagates
    /// into this model.
    pub fn inverse_on_tape(&self, tape: &mut Tape, z: Var, e: Var) -> Result<Var> {
        self.stack.inverse(tape, &self.context(e, Mode::Eval), z)
    }

    pub fn draw_latent(&self, rng: &mut impl Rng) -> GridTensor {
        GridTensor::vector((0..self.dim()).map(|_| StandardNormal.sample(rng)).collect())
    }

    /// Maps a latent `z` to a zone map. The trace, when requested, holds one
    /// state per block plus the latent.
    pub fn sample_from_latent(&self, z: &GridTensor, e: &GridTensor, trace: bool) -> Result<ZoneSample> {
        let e = e.clone().reshape(&[1, e.numel()])?;
        let (vector, steps) = if trace {
            let (v, s) = self
                .stack
                .inverse_traced(&self.params, z, Some(&e), TraceGranularity::Block)?;
            (v, Some(s))
        } else {
            let v = self
                .stack
                .inverse_values(&self.params, &z.clone().reshape(&[1, self.dim()])?, Some(&e))?;
            (v.reshape(&[self.dim()])?, None)
        };
        Ok(ZoneSample {
            map: quantize_zone(&vector, self.classes)?,
            vector,
            trace: steps,
        })
    }

    pub fn sample(&self, e: &GridTensor, rng: &mut impl Rng, trace: bool) -> Result<ZoneSample> {
        let z = self.draw_latent(rng);
        self.sample_from_latent(&z, e, trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dequantize_endpoints_and_round_trip() {
        let zm = ZoneMap::new(2, vec![0, 1, 2, 3], 4).unwrap();
        let v = dequantize_zone_with(&zm, 4, &[0.0; 4]).unwrap();
        assert_eq!(v.data()[0], -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let v = dequantize_zone(&zm, 4, &mut rng);
            assert!(v.data().iter().all(|x| (-0.5..0.5).contains(x)));
            assert_eq!(quantize_zone(&v, 4).unwrap(), zm);
        }
    }

    #[test]
    fn zone_map_validation() {
        assert!(matches!(ZoneMap::new(1, vec![0], 2), Err(Error::Config(_))));
        assert!(matches!(ZoneMap::new(2, vec![0, 1, 2, 0], 2), Err(Error::Data(_))));
        assert!(matches!(ZoneMap::new(2, vec![0, 1], 2), Err(Error::Data(_))));
    }
}
