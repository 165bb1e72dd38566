//! Stage 2: conditional masked-autoregressive flow over per-cell POI
//! counts, plus joint fine-tuning and the end-to-end generation pipeline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_layers::{
    build_made_masks, gaussian_nll, mean_loss_checked, BatchNormLayer, BatchStats, FlowLayer, FlowStack, LayerContext,
    LayerKind, MadeNet, MaskedAutoregressive, Mode, Permutation, StackForward, TraceGranularity, DEFAULT_CLAMP,
};
use crate::fusion::{zone_values_to_labels, FusionModule};
use crate::numerics::{GridTensor, ParamGrads, ParameterStore, Tape, Var};
use crate::optim::{clip_grad_norm, Adam, DEFAULT_CLIP};
use crate::zone_flow::{dequantize_zone, ZoneFlowModel, ZoneMap, ZoneSample};

/// `N×N×P` POI counts, stored cell-major: index `(row·N + col)·P + k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigTensor {
    n: usize,
    p: usize,
    counts: Vec<u32>,
}

impl ConfigTensor {
    pub fn new(n: usize, p: usize, counts: Vec<u32>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::Config(format!(
                "configuration dimensions must be positive, got N={n}, P={p}"
            )));
        }
        if counts.len() != n * n * p {
            return Err(Error::Data(format!(
                "N={n}, P={p} needs {} counts, got {}",
                n * n * p,
                counts.len()
            )));
        }
        Ok(Self { n, p, counts })
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            counts: vec![0; n * n * p],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, row: usize, col: usize, k: usize) -> u32 {
        self.counts[(row * self.n + col) * self.p + k]
    }

    pub fn cell(&self, cell: usize) -> &[u32] {
        &self.counts[cell * self.p..(cell + 1) * self.p]
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    /// Total count per category over all cells.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.p];
        for (i, &c) in self.counts.iter().enumerate() {
            h[i % self.p] += c as u64;
        }
        h
    }

    /// Fraction of cells with no POI of any category.
    pub fn empty_fraction(&self) -> f64 {
        let empty = (0..self.cells())
            .filter(|&c| self.cell(c).iter().all(|&v| v == 0))
            .count();
        empty as f64 / self.cells() as f64
    }
}

/// `ln(1 + count + u)` for caller-supplied noise `u ∈ [0, 1)`.
pub fn dequantize_config_with(x: &ConfigTensor, noise: &[f64]) -> Result<GridTensor> {
    if noise.len() != x.counts.len() {
        return Err(Error::Data(format!(
            "{} noise values for {} counts",
            noise.len(),
            x.counts.len()
        )));
    }
    Ok(GridTensor::vector(
        x.counts
            .iter()
            .zip(noise)
            .map(|(&c, &u)| (1.0 + c as f64 + u).ln())
            .collect(),
    ))
}

pub fn dequantize_config(x: &ConfigTensor, rng: &mut impl Rng) -> GridTensor {
    let noise: Vec<f64> = (0..x.counts.len()).map(|_| rng.random::<f64>()).collect();
    dequantize_config_with(x, &noise).expect("noise length matches")
}

/// `max(0, floor(e^v − 1))`, saturating at `u32::MAX`.
pub fn quantize_config_value(v: f64) -> u32 {
    let c = (v.exp() - 1.0).floor();
    if c.is_nan() || c <= 0.0 {
        0
    } else {
        c.min(u32::MAX as f64) as u32
    }
}

pub fn quantize_config(v: &GridTensor, n: usize, p: usize) -> Result<ConfigTensor> {
    ConfigTensor::new(n, p, v.data().iter().map(|&x| quantize_config_value(x)).collect())
}

/// Category histogram of a state vector after quantization.
pub fn state_histogram(v: &[f64], p: usize) -> Vec<u64> {
    let mut h = vec![0u64; p];
    for (i, &x) in v.iter().enumerate() {
        h[i % p] += quantize_config_value(x) as u64;
    }
    h
}

/// One recorded step of a configuration generation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub layer_index: Option<usize>,
    pub layer_type: Option<LayerKind>,
    pub state: Vec<f64>,
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub steps: Vec<GenerationStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFlowSettings {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub clamp: f64,
    /// Ablation switch for the unconditional autoregressive projections.
    pub unconditional: bool,
    pub mask_seed: u64,
}

impl Default for ConfigFlowSettings {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: vec![64, 64],
            clamp: DEFAULT_CLAMP,
            unconditional: true,
            mask_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConfigSample {
    pub config: ConfigTensor,
    pub vector: GridTensor,
    pub trace: Option<GenerationTrace>,
}

/// Blocks of conditional masked AR → unconditional AR → batch norm, with
/// the variable order reversed between blocks. Parameters live under
/// `config.`.
#[derive(Clone, Debug)]
pub struct ConfigFlowModel {
    n: usize,
    p: usize,
    cond_dim: usize,
    stack: FlowStack,
    pub params: ParameterStore,
}

impl ConfigFlowModel {
    pub fn new(n: usize, p: usize, cond_dim: usize, settings: &ConfigFlowSettings, rng: &mut impl Rng) -> Result<Self> {
        if settings.blocks == 0 {
            return Err(Error::Config("configuration flow needs at least one block".into()));
        }
        let dim = n * n * p;
        let mut params = ParameterStore::new();
        let mut stack = FlowStack::new(dim);
        let mut seed = settings.mask_seed;
        let mut made = |name: String, cond: usize, params: &mut ParameterStore, rng: &mut _| -> Result<FlowLayer> {
            let masks = build_made_masks(dim, &settings.hidden, seed)?;
            seed += 1;
            let net = MadeNet::init(&name, masks, cond, settings.clamp, params, rng)?;
            Ok(FlowLayer::Autoregressive(MaskedAutoregressive::new(net)))
        };
        for k in 0..settings.blocks {
            stack.push(made(format!("config.b{k}.ar"), cond_dim, &mut params, rng)?, k);
            if settings.unconditional {
                stack.push(made(format!("config.b{k}.uar"), 0, &mut params, rng)?, k);
            }
            stack.push(FlowLayer::BatchNorm(BatchNormLayer::new(dim)), k);
            if k + 1 < settings.blocks {
                stack.push(FlowLayer::Permutation(Permutation::reversal(dim)?), k);
            }
        }
        stack.close_order()?;
        Ok(Self {
            n,
            p,
            cond_dim,
            stack,
            params,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.stack.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn stack(&self) -> &FlowStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut FlowStack {
        &mut self.stack
    }

    /// Conditioner evaluations summed over all autoregressive layers.
    pub fn conditioner_evaluations(&self) -> usize {
        self.ar_nets().map(|n| n.evaluations()).sum()
    }

    pub fn reset_evaluations(&self) {
        self.ar_nets().for_each(|n| n.reset_evaluations());
    }

    fn ar_nets(&self) -> impl Iterator<Item = &MadeNet> {
        self.stack.layers().iter().filter_map(|l| match l {
            FlowLayer::Autoregressive(a) => Some(a.net()),
            _ => None,
        })
    }

    /// Forward pass and mean NLL for `x` (`B×d`) conditioned on `cond` (`B×C`).
    pub fn nll_on_tape(&self, tape: &mut Tape, x: Var, cond: Var, mode: Mode) -> Result<(Var, StackForward)> {
        let ctx = LayerContext {
            store: &self.params,
            cond: Some(cond),
            mode,
        };
        let fwd = self.stack.forward(tape, &ctx, x)?;
        let per_sample = gaussian_nll(tape, fwd.output, fwd.logdet)?;
        let mean = mean_loss_checked(tape, per_sample, &fwd.layer_outputs)?;
        Ok((mean, fwd))
    }

    pub fn config_nll(&self, x: &GridTensor, cond: &GridTensor, mode: Mode) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let (loss, _) = self.nll_on_tape(&mut tape, xv, cv, mode)?;
        Ok(tape.value(loss).item())
    }

    pub fn draw_latent(&self, rng: &mut impl Rng) -> GridTensor {
        GridTensor::vector((0..self.dim()).map(|_| StandardNormal.sample(rng)).collect())
    }

    /// Maps a latent to a configuration. The trace has one step per
    /// non-permutation layer plus the latent, each with its quantized
    /// category histogram.
    pub fn sample_from_latent(&self, z: &GridTensor, cond: &GridTensor, trace: bool) -> Result<ConfigSample> {
        let cond = cond.clone().reshape(&[1, cond.numel()])?;
        let (vector, steps) = if trace {
            let (v, steps) = self
                .stack
                .inverse_traced(&self.params, z, Some(&cond), TraceGranularity::Layer)?;
            let steps = steps
                .into_iter()
                .map(|s| GenerationStep {
                    layer_index: s.layer_index,
                    layer_type: s.kind,
                    histogram: state_histogram(s.state.data(), self.p),
                    state: s.state.into_data(),
                })
                .collect();
            (v, Some(GenerationTrace { steps }))
        } else {
            let v = self
                .stack
                .inverse_values(&self.params, &z.clone().reshape(&[1, self.dim()])?, Some(&cond))?;
            (v.reshape(&[self.dim()])?, None)
        };
        Ok(ConfigSample {
            config: quantize_config(&vector, self.n, self.p)?,
            vector,
            trace: steps,
        })
    }

    pub fn sample(&self, cond: &GridTensor, rng: &mut impl Rng, trace: bool) -> Result<ConfigSample> {
        let z = self.draw_latent(rng);
        self.sample_from_latent(&z, cond, trace)
    }
}

/// Knobs of the joint stage-2 objective.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSettings {
    pub lambda_zone: f64,
    /// Learning-rate multiplier for zone parameters.
    pub zone_lr_scale: f64,
    /// Condition fusion on the ground-truth zone map instead of a sampled one.
    pub ground_truth_zones: bool,
}

impl Default for JointSettings {
    fn default() -> Self {
        Self {
            lambda_zone: 0.1,
            zone_lr_scale: 0.1,
            ground_truth_zones: false,
        }
    }
}

/// One training batch for the joint objective, with all randomness drawn.
#[derive(Clone, Debug)]
pub struct JointBatch {
    /// `B×D` urban information vectors.
    pub e: GridTensor,
    /// `B×N²` dequantized ground-truth zone maps.
    pub zone_x: GridTensor,
    /// `B×N²P` dequantized configurations.
    pub config_x: GridTensor,
    /// `B×N²` fixed zone latents for the sampled-zone pathway.
    pub zone_latent: GridTensor,
}

impl JointBatch {
    pub fn draw(items: &[(&GridTensor, &ZoneMap, &ConfigTensor)], classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let b = items.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let (mut e, mut zx, mut cx, mut zl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (ev, zm, x) in items {
            e.extend_from_slice(ev.data());
            zx.extend(dequantize_zone(zm, classes, rng).into_data());
            cx.extend(dequantize_config(x, rng).into_data());
        }
        let dz = zx.len() / b;
        for _ in 0..b * dz {
            zl.push(StandardNormal.sample(rng));
        }
        Ok(Self {
            e: GridTensor::matrix(b, e.len() / b, e)?,
            zone_x: GridTensor::matrix(b, dz, zx)?,
            config_x: GridTensor::matrix(b, cx.len() / b, cx)?,
            zone_latent: GridTensor::matrix(b, dz, zl)?,
        })
    }
}

/// Loss value, gradients over all three parameter groups, and the
/// batch-norm statistics observed by each flow.
#[derive(Debug)]
pub struct JointGradients {
    pub loss: f64,
    pub config_nll: f64,
    pub zone_nll: Option<f64>,
    pub grads: ParamGrads,
    pub zone_stats: Vec<(usize, BatchStats)>,
    pub config_stats: Vec<(usize, BatchStats)>,
}

/// `config_nll + λ·zone_nll` with gradients reaching the zone flow through
/// the sampled-zone pathway (zone inverse → soft labels → fusion).
pub fn joint_loss_gradients(
    zone: &ZoneFlowModel,
    fusion: &FusionModule,
    config: &ConfigFlowModel,
    batch: &JointBatch,
    settings: &JointSettings,
    rng: &mut impl Rng,
) -> Result<JointGradients> {
    let mut tape = Tape::new();
    let e = tape.constant(batch.e.clone());
    let zone_values = if settings.ground_truth_zones {
        tape.constant(batch.zone_x.clone())
    } else {
        let z = tape.constant(batch.zone_latent.clone());
        zone.inverse_on_tape(&mut tape, z, e)?
    };
    let labels = zone_values_to_labels(&mut tape, zone_values, zone.classes());
    let fused = fusion.forward_soft(&mut tape, labels, e, Mode::Train, rng)?;
    let x = tape.constant(batch.config_x.clone());
    let (cfg_loss, cfg_fwd) = config.nll_on_tape(&mut tape, x, fused.attention, Mode::Train)?;
    let mut loss = cfg_loss;
    let mut zone_nll = None;
    let mut zone_stats = Vec::new();
    if settings.lambda_zone != 0.0 {
        let zx = tape.constant(batch.zone_x.clone());
        let (zl, zf) = zone.nll_on_tape(&mut tape, zx, e, Mode::Train)?;
        zone_nll = Some(tape.value(zl).item());
        let weighted = tape.scale(zl, settings.lambda_zone);
        loss = tape.add(loss, weighted)?;
        zone_stats = zf.stats;
    }
    let grads = tape.backward(loss)?.params();
    Ok(JointGradients {
        loss: tape.value(loss).item(),
        config_nll: tape.value(cfg_loss).item(),
        zone_nll,
        grads,
        zone_stats,
        config_stats: cfg_fwd.stats,
    })
}

/// One joint optimizer step; returns the pre-step loss terms.
pub fn joint_finetune_step(
    zone: &mut ZoneFlowModel,
    fusion: &mut FusionModule,
    config: &mut ConfigFlowModel,
    opt: &mut Adam,
    batch: &JointBatch,
    settings: &JointSettings,
    rng: &mut impl Rng,
) -> Result<JointGradients> {
    let mut out = joint_loss_gradients(zone, fusion, config, batch, settings, rng)?;
    if !out.grads.is_finite() {
        return Err(Error::Training {
            sample: 0,
            layer: None,
            detail: "non-finite gradient".into(),
        });
    }
    clip_grad_norm(&mut out.grads, DEFAULT_CLIP);
    opt.begin_step();
    opt.update(&mut config.params, &out.grads, 1.0)?;
    opt.update(&mut fusion.params, &out.grads, 1.0)?;
    opt.update(&mut zone.params, &out.grads, settings.zone_lr_scale)?;
    config.stack.apply_stats(&out.config_stats)?;
    zone.stack_mut().apply_stats(&out.zone_stats)?;
    Ok(out)
}

/// Eval-mode stage-2 conditioning for a batch of zone vectors.
pub fn conditioning(
    zone_values: &GridTensor,
    e: &GridTensor,
    classes: usize,
    fusion: &FusionModule,
    rng: &mut impl Rng,
) -> Result<GridTensor> {
    let mut tape = Tape::new();
    let v = tape.constant(zone_values.clone());
    let ev = tape.constant(e.clone());
    let labels = zone_values_to_labels(&mut tape, v, classes);
    let fused = fusion.forward_soft(&mut tape, labels, ev, Mode::Eval, rng)?;
    Ok(tape.value(fused.attention).clone())
}

/// Eval-mode stage-2 NLL of dequantized configurations, conditioned through
/// zones sampled from fixed latents.
pub fn pipeline_config_nll(
    zone: &ZoneFlowModel,
    fusion: &FusionModule,
    config: &ConfigFlowModel,
    batch: &JointBatch,
    rng: &mut impl Rng,
) -> Result<f64> {
    let v = zone
        .stack()
        .inverse_values(&zone.params, &batch.zone_latent, Some(&batch.e))?;
    let cond = conditioning(&v, &batch.e, zone.classes(), fusion, rng)?;
    config.config_nll(&batch.config_x, &cond, Mode::Eval)
}

/// A full two-stage generation.
#[derive(Clone, Debug)]
pub struct Generation {
    pub zones: ZoneSample,
    pub config: ConfigSample,
}

pub fn generate(
    zone: &ZoneFlowModel,
    fusion: &FusionModule,
    config: &ConfigFlowModel,
    e: &GridTensor,
    rng: &mut impl Rng,
    trace: bool,
) -> Result<Generation> {
    let zones = zone.sample(e, rng, false)?;
    let d = zone.dim();
    let cond = conditioning(
        &zones.vector.clone().reshape(&[1, d])?,
        &e.clone().reshape(&[1, e.numel()])?,
        zone.classes(),
        fusion,
        rng,
    )?;
    let config = config.sample(&cond, rng, trace)?;
    Ok(Generation { zones, config })
}
