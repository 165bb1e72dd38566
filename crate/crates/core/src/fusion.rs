//! Information fusion: a convolutional geographic embedding of the zone
//! map, per-zone weighting of the condition vector, and multi-head
//! attention over the resulting zone embeddings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow_layers::Mode;
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};
use crate::zone_flow::ZoneMap;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSettings {
    /// Stem channels; doubled at every down-sample.
    pub channels: usize,
    /// Number of ConvNeXt layers.
    pub depth: usize,
    pub layer_scale_init: f64,
    pub drop_path: f64,
    /// Attention heads; 0 picks the largest divisor of the width up to 4.
    pub heads: usize,
    /// Ablation switch: without attention the flow is conditioned on `c`.
    pub attention: bool,
    /// Ablation switch: without the extractor `o` is zero.
    pub geo: bool,
    /// Sharpness of the soft zone indicators built from continuous labels.
    pub soft_sharpness: f64,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            channels: 8,
            depth: 3,
            layer_scale_init: 1e-6,
            drop_path: 0.0,
            heads: 0,
            attention: true,
            geo: true,
            soft_sharpness: 10.0,
        }
    }
}

pub fn resolve_heads(width: usize, requested: usize) -> Result<usize> {
    match requested {
        0 => Ok((1..=4.min(width)).rev().find(|h| width.is_multiple_of(*h)).unwrap_or(1)),
        h if width.is_multiple_of(h) => Ok(h),
        h => Err(Error::Config(format!(
            "embedding width {width} is not divisible by {h} heads"
        ))),
    }
}

fn param(tape: &mut Tape, store: &ParameterStore, name: &str) -> Result<Var> {
    Ok(tape.param(name, store.get(name)?))
}

fn insert_conv(
    store: &mut ParameterStore,
    name: &str,
    cout: usize,
    cin_g: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = (cin_g * k * k) as f64;
    store.insert_normal(format!("{name}.weight"), &[cout, cin_g, k, k], 1.0 / fan_in.sqrt(), rng)?;
    store.insert(format!("{name}.bias"), GridTensor::zeros(&[cout]))
}

fn insert_ln(store: &mut ParameterStore, name: &str, c: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), GridTensor::full(&[c], 1.0))?;
    store.insert(format!("{name}.beta"), GridTensor::zeros(&[c]))
}

fn conv(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var, stride: usize, groups: usize) -> Result<Var> {
    let w = param(tape, store, &format!("{name}.weight"))?;
    let b = param(tape, store, &format!("{name}.bias"))?;
    tape.conv2d(x, w, b, stride, groups)
}

fn ln(tape: &mut Tape, store: &ParameterStore, name: &str, x: Var, axis: usize) -> Result<Var> {
    let g = param(tape, store, &format!("{name}.gamma"))?;
    let b = param(tape, store, &format!("{name}.beta"))?;
    tape.layer_norm(x, axis, g, b, LN_EPS)
}

/// Stem → (ConvNeXt layer → down-sample)×(depth−1) → ConvNeXt layer →
/// pooled head, producing one `D`-vector per zone map.
#[derive(Clone, Debug)]
pub struct GeoExtractor {
    prefix: String,
    side: usize,
    channels: Vec<usize>,
    out_dim: usize,
    drop_path: f64,
}

impl GeoExtractor {
    pub fn init(
        prefix: &str,
        side: usize,
        out_dim: usize,
        settings: &FusionSettings,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if settings.depth == 0 || settings.channels == 0 {
            return Err(Error::Config("extractor needs positive depth and channels".into()));
        }
        if side < 1 << (settings.depth - 1) {
            return Err(Error::Config(format!(
                "grid side {side} is too small for {} down-samples",
                settings.depth - 1
            )));
        }
        let channels: Vec<usize> = (0..settings.depth).map(|l| settings.channels << l).collect();
        let c0 = channels[0];
        insert_conv(store, &format!("{prefix}.stem"), c0, 1, 3, rng)?;
        insert_ln(store, &format!("{prefix}.stem.ln"), c0)?;
        for (l, &c) in channels.iter().enumerate() {
            let name = format!("{prefix}.cx{l}");
            insert_conv(store, &format!("{name}.dw"), c, 1, 3, rng)?;
            insert_ln(store, &format!("{name}.ln"), c)?;
            insert_conv(store, &format!("{name}.pw1"), 4 * c, c, 1, rng)?;
            insert_conv(store, &format!("{name}.pw2"), c, 4 * c, 1, rng)?;
            store.insert(
                format!("{name}.scale"),
                GridTensor::full(&[c], settings.layer_scale_init),
            )?;
            if l + 1 < channels.len() {
                let name = format!("{prefix}.down{l}");
                insert_ln(store, &format!("{name}.ln"), c)?;
                insert_conv(store, &name, 2 * c, c, 2, rng)?;
            }
        }
        let last = *channels.last().expect("depth > 0");
        insert_ln(store, &format!("{prefix}.head.ln"), last)?;
        store.insert_normal(
            format!("{prefix}.head.weight"),
            &[last, out_dim],
            1.0 / (last as f64).sqrt(),
            rng,
        )?;
        store.insert(format!("{prefix}.head.bias"), GridTensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            prefix: prefix.to_string(),
            side,
            channels,
            out_dim,
            drop_path: settings.drop_path,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn stem(&self, tape: &mut Tape, store: &ParameterStore, image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.side || shape[3] != self.side {
            return Err(Error::Dimension {
                op: "extract_geo_embedding",
                detail: format!("image axes {shape:?}, expected B×1×{0}×{0}", self.side),
            });
        }
        let p = &self.prefix;
        let h = conv(tape, store, &format!("{p}.stem"), image, 1, 1)?;
        ln(tape, store, &format!("{p}.stem.ln"), h, 1)
    }

    /// One residual ConvNeXt layer on a `B×C×H×W` tensor.
    pub fn convnext_layer(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        l: usize,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let c = self.channels[l];
        let name = format!("{}.cx{l}", self.prefix);
        let h = conv(tape, store, &format!("{name}.dw"), x, 1, c)?;
        let h = ln(tape, store, &format!("{name}.ln"), h, 1)?;
        let h = conv(tape, store, &format!("{name}.pw1"), h, 1, 1)?;
        let h = tape.gelu(h);
        let h = conv(tape, store, &format!("{name}.pw2"), h, 1, 1)?;
        let gamma = param(tape, store, &format!("{name}.scale"))?;
        let mut h = tape.mul_channel(h, gamma)?;
        if mode == Mode::Train && self.drop_path > 0.0 {
            let shape = tape.value(h).shape().to_vec();
            let per_sample = shape[1..].iter().product::<usize>();
            let keep = 1.0 - self.drop_path;
            let mut mask = Vec::with_capacity(shape[0] * per_sample);
            for _ in 0..shape[0] {
                let v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                mask.extend(std::iter::repeat_n(v, per_sample));
            }
            h = tape.mul_const(h, GridTensor::new(shape, mask)?)?;
        }
        tape.add(x, h)
    }

    pub fn downsample(&self, tape: &mut Tape, store: &ParameterStore, l: usize, x: Var) -> Result<Var> {
        let name = format!("{}.down{l}", self.prefix);
        let h = ln(tape, store, &format!("{name}.ln"), x, 1)?;
        conv(tape, store, &name, h, 2, 1)
    }

    /// Global average pool → layer norm → linear, giving `B×D`.
    pub fn head(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let h = tape.global_avg_pool(x)?;
        let h = ln(tape, store, &format!("{p}.head.ln"), h, 1)?;
        let w = param(tape, store, &format!("{p}.head.weight"))?;
        let b = param(tape, store, &format!("{p}.head.bias"))?;
        let h = tape.matmul(h, w)?;
        tape.add_row(h, b)
    }

    /// `image` is `B×1×N×N` with labels rescaled to `[0, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        image: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut h = self.stem(tape, store, image)?;
        for l in 0..self.depth() {
            h = self.convnext_layer(tape, store, l, h, mode, rng)?;
            if l + 1 < self.depth() {
                h = self.downsample(tape, store, l, h)?;
            }
        }
        self.head(tape, store, h)
    }
}

/// Zone labels rescaled to `[0, 1]` as a single-channel `1×1×N×N` image.
pub fn zone_image(zm: &ZoneMap, classes: usize) -> Result<GridTensor> {
    let n = zm.n();
    let scale = 1.0 / (classes.max(2) - 1) as f64;
    GridTensor::new(
        vec![1, 1, n, n],
        zm.labels().iter().map(|&l| l as f64 * scale).collect(),
    )
}

pub fn extract_geo_embedding(
    ex: &GeoExtractor,
    store: &ParameterStore,
    zm: &ZoneMap,
    classes: usize,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<GridTensor> {
    let mut tape = Tape::new();
    let image = tape.constant(zone_image(zm, classes)?);
    let o = ex.forward(&mut tape, store, image, mode, rng)?;
    Ok(tape.value(o).clone())
}

/// Binary indicator masks, one `N×N` grid per zone type.
#[derive(Clone, Debug, PartialEq)]
pub struct ZonePartition {
    /// `M×N×N`.
    pub masks: GridTensor,
}

impl ZonePartition {
    pub fn classes(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn mask(&self, m: usize) -> &[f64] {
        let l = self.side() * self.side();
        &self.masks.data()[m * l..(m + 1) * l]
    }
}

pub fn partition_zones(zm: &ZoneMap, classes: usize) -> Result<ZonePartition> {
    let n = zm.n();
    let l = n * n;
    let mut masks = vec![0.0; classes * l];
    for (cell, &label) in zm.labels().iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("zone label {label} outside 0..{classes}")));
        }
        masks[label * l + cell] = 1.0;
    }
    Ok(ZonePartition {
        masks: GridTensor::new(vec![classes, n, n], masks)?,
    })
}

/// `c = softmax_M(avg(Z)·W_z) ⊗ (W_s·e + W_g·o)` for a batch. `masks` is
/// `B×M×N²`, `e` and `o` are `B×D`, `w_z` is `N×1`, `w_s`/`w_g` hold one value.
/// Returns `(c as B×(M·D), zone weights as B×M)`.
pub fn semantic_projection_on_tape(
    tape: &mut Tape,
    masks: Var,
    e: Var,
    o: Var,
    w_z: Var,
    w_s: Var,
    w_g: Var,
) -> Result<(Var, Var)> {
    let shape = tape.value(masks).shape().to_vec();
    let [b, m, l] = shape[..] else {
        return Err(Error::Dimension {
            op: "semantic_projection",
            detail: format!("mask axes {shape:?}, expected B×M×N²"),
        });
    };
    let n = tape.value(w_z).shape()[0];
    if n * n != l || tape.value(w_z).shape() != [n, 1] {
        return Err(Error::Dimension {
            op: "semantic_projection",
            detail: format!("W_z axes {:?} vs {l} cells", tape.value(w_z).shape()),
        });
    }
    let grids = tape.reshape(masks, &[b * m, n, n])?;
    let avg = tape.mean_axis(grids, 1)?;
    let avg = tape.reshape(avg, &[b * m, n])?;
    let logits = tape.matmul(avg, w_z)?;
    let logits = tape.reshape(logits, &[b, m])?;
    let weights = tape.softmax(logits);
    let se = tape.mul_scalar_var(e, w_s)?;
    let go = tape.mul_scalar_var(o, w_g)?;
    let v = tape.add(se, go)?;
    Ok((tape.batch_outer(weights, v)?, weights))
}

/// Per-zone embedding `c` (`M×D`) and the zone weights that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub c: GridTensor,
    pub zone_weights: GridTensor,
}

pub fn semantic_projection(
    part: &ZonePartition,
    e: &GridTensor,
    o: &GridTensor,
    w_z: &GridTensor,
    w_s: f64,
    w_g: f64,
) -> Result<FusedEmbedding> {
    let (m, n) = (part.classes(), part.side());
    if e.numel() != o.numel() {
        return Err(Error::Dimension {
            op: "semantic_projection",
            detail: format!("e has {} entries, o has {}", e.numel(), o.numel()),
        });
    }
    let d = e.numel();
    let mut tape = Tape::new();
    let masks = tape.constant(part.masks.clone().reshape(&[1, m, n * n])?);
    let ev = tape.constant(e.clone().reshape(&[1, d])?);
    let ov = tape.constant(o.clone().reshape(&[1, d])?);
    let wz = tape.constant(w_z.clone());
    let ws = tape.constant(GridTensor::scalar(w_s));
    let wg = tape.constant(GridTensor::scalar(w_g));
    let (c, w) = semantic_projection_on_tape(&mut tape, masks, ev, ov, wz, ws, wg)?;
    Ok(FusedEmbedding {
        c: tape.value(c).clone().reshape(&[m, d])?,
        zone_weights: tape.value(w).clone().reshape(&[m])?,
    })
}

/// Bias-free multi-head self-attention with `D×D` query, key, value and
/// output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    prefix: String,
    width: usize,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        prefix: &str,
        width: usize,
        heads: usize,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let heads = resolve_heads(width, heads)?;
        for p in ["query", "key", "value", "output"] {
            store.insert_normal(
                format!("{prefix}.{p}"),
                &[width, width],
                1.0 / (width as f64).sqrt(),
                rng,
            )?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            width,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `x` is `(groups·rows)×D`; attention runs within each group of rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, groups: usize, rows: usize) -> Result<Var> {
        let proj = |tape: &mut Tape, p: &str| -> Result<Var> {
            let w = param(tape, store, &format!("{}.{p}", self.prefix))?;
            tape.matmul(x, w)
        };
        let q = proj(tape, "query")?;
        let k = proj(tape, "key")?;
        let v = proj(tape, "value")?;
        let a = tape.attention(q, k, v, groups, rows, self.heads)?;
        let w = param(tape, store, &format!("{}.output", self.prefix))?;
        tape.matmul(a, w)
    }
}

/// Attention over the rows of one fused embedding.
pub fn multi_head_attention(
    c: &FusedEmbedding,
    attn: &MultiHeadAttention,
    store: &ParameterStore,
) -> Result<GridTensor> {
    let (m, d) = c.c.dims2()?;
    if d != attn.width {
        return Err(Error::Config(format!(
            "attention width {} vs embedding width {d}",
            attn.width
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(c.c.clone());
    let a = attn.forward(&mut tape, store, x, 1, m)?;
    Ok(tape.value(a).clone())
}

/// Tape outputs of a fusion pass for a batch.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `B×(M·D)` fused embedding.
    pub c: Var,
    /// `B×M` zone weights.
    pub weights: Var,
    /// `B×(M·D)` conditioning input for stage 2 (attention output, or `c`
    /// when attention is disabled).
    pub attention: Var,
}

/// All fusion parameters live under `fusion.`.
#[derive(Clone, Debug)]
pub struct FusionModule {
    side: usize,
    classes: usize,
    width: usize,
    settings: FusionSettings,
    geo: Option<GeoExtractor>,
    attn: Option<MultiHeadAttention>,
    pub params: ParameterStore,
}

impl FusionModule {
    pub fn new(
        side: usize,
        classes: usize,
        width: usize,
        settings: &FusionSettings,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut params = ParameterStore::new();
        params.insert_normal("fusion.w_z", &[side, 1], 1.0 / (side as f64).sqrt(), rng)?;
        params.insert("fusion.w_s", GridTensor::scalar(1.0))?;
        params.insert("fusion.w_g", GridTensor::scalar(1.0))?;
        let geo = if settings.geo {
            Some(GeoExtractor::init(
                "fusion.geo",
                side,
                width,
                settings,
                &mut params,
                rng,
            )?)
        } else {
            None
        };
        let attn = if settings.attention {
            Some(MultiHeadAttention::init(
                "fusion.attn",
                width,
                settings.heads,
                &mut params,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            side,
            classes,
            width,
            settings: settings.clone(),
            geo,
            attn,
            params,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Width of the flattened stage-2 conditioning input.
    pub fn output_dim(&self) -> usize {
        self.classes * self.width
    }

    pub fn settings(&self) -> &FusionSettings {
        &self.settings
    }

    pub fn geo(&self) -> Option<&GeoExtractor> {
        self.geo.as_ref()
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        self.attn.as_ref()
    }

    /// Fusion from explicit masks (`B×M×N²`) and image (`B×1×N×N`).
    pub fn forward_parts(
        &self,
        tape: &mut Tape,
        masks: Var,
        image: Var,
        e: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<FusionOutput> {
        let (b, d) = tape.value(e).dims2()?;
        if d != self.width {
            return Err(Error::Config(format!(
                "condition width {d}, fusion built for {}",
                self.width
            )));
        }
        let store = &self.params;
        let o = match &self.geo {
            Some(g) => g.forward(tape, store, image, mode, rng)?,
            None => tape.constant(GridTensor::zeros(&[b, d])),
        };
        let w_z = param(tape, store, "fusion.w_z")?;
        let w_s = param(tape, store, "fusion.w_s")?;
        let w_g = param(tape, store, "fusion.w_g")?;
        let (c, weights) = semantic_projection_on_tape(tape, masks, e, o, w_z, w_s, w_g)?;
        let attention = match &self.attn {
            Some(a) => {
                let rows = tape.reshape(c, &[b * self.classes, d])?;
                let out = a.forward(tape, store, rows, b, self.classes)?;
                tape.reshape(out, &[b, self.classes * d])?
            }
            None => c,
        };
        Ok(FusionOutput { c, weights, attention })
    }

    /// Fusion from a continuous label field `B×N²` (label `k` at value `k`),
    /// using soft zone indicators so gradients reach the labels.
    pub fn forward_soft(
        &self,
        tape: &mut Tape,
        labels: Var,
        e: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<FusionOutput> {
        let (b, l) = tape.value(labels).dims2()?;
        if l != self.side * self.side {
            return Err(Error::Config(format!(
                "{l} label cells, fusion built for side {}",
                self.side
            )));
        }
        let masks = tape.soft_masks(labels, self.classes, self.settings.soft_sharpness)?;
        let scaled = tape.scale(labels, 1.0 / (self.classes - 1) as f64);
        let image = tape.reshape(scaled, &[b, 1, self.side, self.side])?;
        self.forward_parts(tape, masks, image, e, mode, rng)
    }

    /// Fusion of hard zone maps (binary masks).
    pub fn forward_maps(
        &self,
        tape: &mut Tape,
        maps: &[&ZoneMap],
        e: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<FusionOutput> {
        let (m, n) = (self.classes, self.side);
        let mut masks = Vec::with_capacity(maps.len() * m * n * n);
        let mut image = Vec::with_capacity(maps.len() * n * n);
        for zm in maps {
            masks.extend_from_slice(partition_zones(zm, m)?.masks.data());
            image.extend_from_slice(zone_image(zm, m)?.data());
        }
        let masks = tape.constant(GridTensor::new(vec![maps.len(), m, n * n], masks)?);
        let image = tape.constant(GridTensor::new(vec![maps.len(), 1, n, n], image)?);
        self.forward_parts(tape, masks, image, e, mode, rng)
    }
}

/// Continuous label field from dequantized zone values: the centre of the
/// bin for label `k` maps to `k`.
pub fn zone_values_to_labels(tape: &mut Tape, v: Var, classes: usize) -> Var {
    let shifted = tape.add_scalar(v, 0.5);
    let scaled = tape.scale(shifted, classes as f64);
    tape.add_scalar(scaled, -0.5)
}
