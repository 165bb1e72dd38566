//! The subcommands, as library functions over explicit paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;
use urbanflow::config_flow::{
    generate, joint_finetune_step, pipeline_config_nll, quantize_config, ConfigTensor, Generation, JointBatch,
};
use urbanflow::flow_layers::Mode;
use urbanflow::metrics::{avg_weighted, hellinger, kl_div, to_distribution, wasserstein_1d, DEFAULT_SMOOTHING};
use urbanflow::numerics::GridTensor;
use urbanflow::optim::Adam;
use urbanflow::synthdata::{
    encode_guidance, generate_sample, read_dataset, write_dataset, DatasetHeader, SynthSample, GUIDANCE_LEVELS,
};
use urbanflow::zone_flow::dequantize_zone_batch;
use urbanflow::Error;

use crate::bundle::{stream_rng, ModelBundle, Stream};
use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::render::render_ppm;

/// Rows per chunk when scoring a whole dataset.
const EVAL_CHUNK: usize = 100;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_comment(config: &RunConfig) -> String {
    config.entries().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

// ---------------------------------------------------------------- synth

/// `count` samples with green levels assigned round-robin.
pub fn synth_samples(config: &RunConfig, count: usize) -> urbanflow::Result<Vec<SynthSample>> {
    config.validate()?;
    (0..count)
        .map(|i| {
            let mut s = generate_sample(
                config.seed ^ i as u64,
                config.n,
                config.m,
                config.p,
                i % GUIDANCE_LEVELS,
            )?;
            s.id = i as u64;
            Ok(s)
        })
        .collect()
}

pub fn cmd_synth(config: &RunConfig, count: usize, out: &Path) -> CliResult<()> {
    let samples = synth_samples(config, count)?;
    write_dataset(out, &DatasetHeader::new(config.n, config.m, config.p), &samples)?;
    Ok(())
}

/// Reads a dataset and checks it matches the configured dimensions.
pub fn load_dataset(config: &RunConfig, path: &Path) -> CliResult<Vec<SynthSample>> {
    let ds = read_dataset(path)?;
    if let Some(h) = &ds.header {
        if (h.n, h.m, h.p) != (config.n, config.m, config.p) {
            return Err(Error::Config(format!(
                "dataset has N={} M={} P={}, config has N={} M={} P={}",
                h.n, h.m, h.p, config.n, config.m, config.p
            ))
            .into());
        }
    }
    Ok(ds.samples)
}

// ---------------------------------------------------------------- training

fn info_matrix(samples: &[&SynthSample]) -> urbanflow::Result<GridTensor> {
    let mut data = Vec::new();
    for s in samples {
        data.extend(s.info_vector()?.into_data());
    }
    GridTensor::matrix(samples.len(), data.len() / samples.len().max(1), data)
}

/// Shuffled passes over the dataset.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_trainable(config: &RunConfig, samples: &[SynthSample]) -> urbanflow::Result<usize> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        if s.zones.n() != config.n || s.config.n() != config.n || s.config.p() != config.p {
            return Err(Error::Data(format!(
                "sample {} does not match the configured grid",
                s.id
            )));
        }
    }
    Ok(config.batch_size.min(samples.len()))
}

/// Outcome of a training run. NLLs are eval-mode means over the whole
/// dataset under fixed dequantization noise.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_nll: f64,
    pub final_nll: f64,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn relative_reduction(&self) -> f64 {
        (self.initial_nll - self.final_nll) / self.initial_nll.abs()
    }
}

/// A failed run, with the bundle rolled back to the last good state.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: usize,
}

/// Fixed-noise stage-1 scoring batches over the whole dataset.
pub fn zone_reference(config: &RunConfig, samples: &[SynthSample]) -> urbanflow::Result<Vec<(GridTensor, GridTensor)>> {
    let mut rng = stream_rng(config.seed, Stream::Reference);
    let refs: Vec<&SynthSample> = samples.iter().collect();
    refs.chunks(EVAL_CHUNK)
        .map(|chunk| {
            let maps: Vec<_> = chunk.iter().map(|s| &s.zones).collect();
            Ok((dequantize_zone_batch(&maps, config.m, &mut rng)?, info_matrix(chunk)?))
        })
        .collect()
}

pub fn zone_reference_nll(bundle: &ModelBundle, reference: &[(GridTensor, GridTensor)]) -> urbanflow::Result<f64> {
    let (mut total, mut rows) = (0.0, 0);
    for (x, e) in reference {
        let b = x.shape()[0];
        total += bundle.zone.zone_nll(x, e, Mode::Eval)? * b as f64;
        rows += b;
    }
    Ok(total / rows as f64)
}

/// Runs the stage-1 budget on `bundle`. On failure the bundle holds the
/// parameters from before the failing step.
pub fn train_zone(
    bundle: &mut ModelBundle,
    samples: &[SynthSample],
    log: &mut dyn FnMut(usize, f64),
) -> std::result::Result<TrainReport, TrainFailure> {
    let fail = |error, step| TrainFailure { error, step };
    let batch = check_trainable(&bundle.config, samples).map_err(|e| fail(e, 0))?;
    let reference = zone_reference(&bundle.config, samples).map_err(|e| fail(e, 0))?;
    let initial_nll = zone_reference_nll(bundle, &reference).map_err(|e| fail(e, 0))?;
    let mut opt = Adam::new(bundle.config.lr);
    let mut batcher = Batcher::new(samples.len());
    let mut losses = Vec::with_capacity(bundle.config.zone_steps);
    for step in 0..bundle.config.zone_steps {
        let good = bundle.clone();
        let result = (|| {
            let idx = batcher.next(batch, &mut bundle.rng);
            let chosen: Vec<&SynthSample> = idx.iter().map(|&i| &samples[i]).collect();
            let maps: Vec<_> = chosen.iter().map(|s| &s.zones).collect();
            let x = dequantize_zone_batch(&maps, bundle.config.m, &mut bundle.rng)?;
            let e = info_matrix(&chosen)?;
            let loss = bundle.zone.train_step(&mut opt, &x, &e)?;
            finite_loss(loss, step)
        })();
        match result {
            Ok(loss) => {
                log(step, loss);
                losses.push(loss);
            }
            Err(e) => {
                *bundle = good;
                return Err(fail(e, step));
            }
        }
    }
    let final_nll = zone_reference_nll(bundle, &reference).map_err(|e| fail(e, bundle.config.zone_steps))?;
    Ok(TrainReport {
        initial_nll,
        final_nll,
        losses,
    })
}

fn finite_loss(loss: f64, step: usize) -> urbanflow::Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training {
            sample: 0,
            layer: None,
            detail: format!("loss {loss} at step {step}"),
        })
    }
}

/// Fixed-noise, fixed-latent stage-2 scoring batches over the dataset.
pub fn config_reference(config: &RunConfig, samples: &[SynthSample]) -> urbanflow::Result<Vec<JointBatch>> {
    let mut rng = stream_rng(config.seed, Stream::Reference);
    let infos = samples
        .iter()
        .map(|s| s.info_vector())
        .collect::<urbanflow::Result<Vec<_>>>()?;
    let items: Vec<_> = samples
        .iter()
        .zip(&infos)
        .map(|(s, e)| (e, &s.zones, &s.config))
        .collect();
    items
        .chunks(EVAL_CHUNK)
        .map(|chunk| JointBatch::draw(chunk, config.m, &mut rng))
        .collect()
}

pub fn config_reference_nll(bundle: &ModelBundle, reference: &[JointBatch]) -> urbanflow::Result<f64> {
    let (fusion, flow) = bundle.stage_two()?;
    let mut rng = stream_rng(bundle.config.seed, Stream::Evaluation);
    let (mut total, mut rows) = (0.0, 0);
    for batch in reference {
        let b = batch.e.shape()[0];
        total += pipeline_config_nll(&bundle.zone, fusion, flow, batch, &mut rng)? * b as f64;
        rows += b;
    }
    Ok(total / rows as f64)
}

/// Runs the joint stage-2 budget. `log` receives the step, joint loss,
/// configuration NLL and weighted-in zone NLL.
pub fn train_config(
    bundle: &mut ModelBundle,
    samples: &[SynthSample],
    log: &mut dyn FnMut(usize, f64, f64, Option<f64>),
) -> std::result::Result<TrainReport, TrainFailure> {
    let fail = |error, step| TrainFailure { error, step };
    let batch = check_trainable(&bundle.config, samples).map_err(|e| fail(e, 0))?;
    let reference = config_reference(&bundle.config, samples).map_err(|e| fail(e, 0))?;
    let initial_nll = config_reference_nll(bundle, &reference).map_err(|e| fail(e, 0))?;
    let infos = samples
        .iter()
        .map(|s| s.info_vector())
        .collect::<urbanflow::Result<Vec<_>>>()
        .map_err(|e| fail(e, 0))?;
    let settings = bundle.config.joint_settings();
    let mut opt = Adam::new(bundle.config.lr);
    let mut batcher = Batcher::new(samples.len());
    let mut losses = Vec::with_capacity(bundle.config.config_steps);
    for step in 0..bundle.config.config_steps {
        let good = bundle.clone();
        let result = (|| {
            let idx = batcher.next(batch, &mut bundle.rng);
            let items: Vec<_> = idx
                .iter()
                .map(|&i| (&infos[i], &samples[i].zones, &samples[i].config))
                .collect();
            let jb = JointBatch::draw(&items, bundle.config.m, &mut bundle.rng)?;
            let (fusion, flow) = bundle
                .stage_two
                .as_mut()
                .ok_or_else(|| Error::Pipeline("stage-two models missing".into()))?;
            let out = joint_finetune_step(
                &mut bundle.zone,
                fusion,
                flow,
                &mut opt,
                &jb,
                &settings,
                &mut bundle.rng,
            )?;
            finite_loss(out.loss, step)?;
            Ok((out.loss, out.config_nll, out.zone_nll))
        })();
        match result {
            Ok((loss, cfg, zone)) => {
                log(step, loss, cfg, zone);
                losses.push(loss);
            }
            Err(e) => {
                *bundle = good;
                return Err(fail(e, step));
            }
        }
    }
    let final_nll = config_reference_nll(bundle, &reference).map_err(|e| fail(e, bundle.config.config_steps))?;
    Ok(TrainReport {
        initial_nll,
        final_nll,
        losses,
    })
}

fn log_path(out: &Path, log: Option<&Path>) -> PathBuf {
    log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    })
}

pub fn cmd_train_zone(config: &RunConfig, data: &Path, out: &Path, log: Option<&Path>) -> CliResult<TrainReport> {
    let samples = load_dataset(config, data)?;
    let mut bundle = ModelBundle::zone_only(config)?;
    let mut text = config_comment(config);
    text.push_str("step\tnll\n");
    let result = train_zone(&mut bundle, &samples, &mut |step, loss| {
        let _ = writeln!(text, "{step}\t{loss}");
    });
    finish_training(out, &log_path(out, log), &bundle, text, result)
}

/// Checks that the stage-1 architecture in `zone` matches `config`.
fn check_zone_compatible(zone: &RunConfig, config: &RunConfig) -> urbanflow::Result<()> {
    let keys = [
        "n",
        "m",
        "p",
        "zone_blocks",
        "hidden_width",
        "hidden_layers",
        "clamp",
        "use_condition_projection",
    ];
    let (a, b) = (zone.entries(), config.entries());
    for k in keys {
        if a[k] != b[k] {
            return Err(Error::Config(format!(
                "zone checkpoint has {k} = {}, config has {k} = {}",
                a[k], b[k]
            )));
        }
    }
    Ok(())
}

pub fn cmd_train_config(
    config: &RunConfig,
    data: &Path,
    zone_ckpt: &Path,
    out: &Path,
    log: Option<&Path>,
) -> CliResult<TrainReport> {
    config.validate()?;
    if !zone_ckpt.is_file() {
        return Err(Error::Pipeline(format!("zone checkpoint {} not found", zone_ckpt.display())).into());
    }
    let mut bundle = checkpoint::load(zone_ckpt)?;
    check_zone_compatible(&bundle.config, config)?;
    bundle.config = config.clone();
    bundle.add_stage_two()?;
    let samples = load_dataset(config, data)?;
    let mut text = config_comment(config);
    text.push_str("step\tloss\tconfig_nll\tzone_nll\n");
    let result = train_config(&mut bundle, &samples, &mut |step, loss, cfg, zone| {
        let zone = zone.map_or("-".to_string(), |z| z.to_string());
        let _ = writeln!(text, "{step}\t{loss}\t{cfg}\t{zone}");
    });
    finish_training(out, &log_path(out, log), &bundle, text, result)
}

fn finish_training(
    out: &Path,
    log: &Path,
    bundle: &ModelBundle,
    mut text: String,
    result: std::result::Result<TrainReport, TrainFailure>,
) -> CliResult<TrainReport> {
    checkpoint::save(out, bundle)?;
    match result {
        Ok(report) => {
            let _ = writeln!(text, "# eval_nll_initial = {}", report.initial_nll);
            let _ = writeln!(text, "# eval_nll_final = {}", report.final_nll);
            std::fs::write(log, text)?;
            Ok(report)
        }
        Err(f) => {
            let _ = writeln!(text, "# aborted at step {}: {}", f.step, f.error);
            std::fs::write(log, text)?;
            Err(f.error.into())
        }
    }
}

// ---------------------------------------------------------------- generation

/// Where the urban context of a generation comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextSource {
    /// The context graph of a dataset sample, by id.
    Sample { dataset: PathBuf, id: u64 },
    /// A freshly synthesized context graph.
    Seed(u64),
}

/// Urban information vector for `green_level` under `source`.
pub fn info_for(config: &RunConfig, source: &ContextSource, green_level: usize) -> CliResult<GridTensor> {
    encode_guidance(green_level)?;
    let mut sample = match source {
        ContextSource::Sample { dataset, id } => load_dataset(config, dataset)?
            .into_iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| Error::Data(format!("no sample with id {id} in {}", dataset.display())))?,
        ContextSource::Seed(seed) => generate_sample(*seed, config.n, config.m, config.p, green_level)?,
    };
    sample.green_level = green_level;
    Ok(sample.info_vector()?)
}

#[derive(Clone, Debug)]
pub struct GenerateRequest {
    pub green_level: usize,
    pub context: ContextSource,
    pub count: usize,
    pub trace: bool,
    pub seed: u64,
}

/// Generations for `request`, in order.
pub fn generate_many(
    bundle: &ModelBundle,
    e: &GridTensor,
    count: usize,
    trace: bool,
    seed: u64,
) -> CliResult<Vec<Generation>> {
    let (fusion, flow) = bundle.stage_two()?;
    let mut rng = stream_rng(seed, Stream::Evaluation);
    (0..count)
        .map(|_| Ok(generate(&bundle.zone, fusion, flow, e, &mut rng, trace)?))
        .collect()
}

/// Writes `sample_{i}.json` and `sample_{i}.ppm` per generation, plus
/// `sample_{i}.trace.jsonl` and `sample_{i}_step{k}.ppm` when traced.
pub fn cmd_generate(ckpt: &Path, request: &GenerateRequest, out_dir: &Path) -> CliResult<Vec<Generation>> {
    let bundle = checkpoint::load(ckpt)?;
    let config = &bundle.config;
    let e = info_for(config, &request.context, request.green_level)?;
    let gens = generate_many(&bundle, &e, request.count, request.trace, request.seed)?;
    std::fs::create_dir_all(out_dir)?;
    for (i, g) in gens.iter().enumerate() {
        let record = json!({
            "config": config.entries(),
            "index": i,
            "green_level": request.green_level,
            "n": g.config.config.n(),
            "p": g.config.config.p(),
            "zones": g.zones.map.labels(),
            "counts": g.config.config.counts(),
            "histogram": g.config.config.histogram(),
        });
        std::fs::write(out_dir.join(format!("sample_{i}.json")), format!("{record}\n"))?;
        render_ppm(&g.config.config, &out_dir.join(format!("sample_{i}.ppm")))?;
        if let Some(trace) = &g.config.trace {
            let mut f =
                std::io::BufWriter::new(std::fs::File::create(out_dir.join(format!("sample_{i}.trace.jsonl")))?);
            for (k, step) in trace.steps.iter().enumerate() {
                writeln!(f, "{}", serde_json::to_string(step).expect("step serializes"))?;
                let state = quantize_config(&GridTensor::vector(step.state.clone()), config.n, config.p)?;
                render_ppm(&state, &out_dir.join(format!("sample_{i}_step{k:02}.ppm")))?;
            }
            f.flush()?;
        }
    }
    Ok(gens)
}

// ---------------------------------------------------------------- evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct LevelRow {
    pub level: usize,
    pub count: usize,
    pub kl: f64,
    pub hd: f64,
    pub wd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<LevelRow>,
    pub avg_kl: f64,
    pub avg_hd: f64,
    pub avg_wd: f64,
    /// Levels skipped for lack of samples.
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_text(&self, config: &RunConfig) -> String {
        let mut s = config_comment(config);
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s.push_str("level\tcount\tKL\tHD\tWD\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.9}\t{:.9}\t{:.9}", r.level, r.count, r.kl, r.hd, r.wd);
        }
        let _ = writeln!(s, "AVG_KL\t{:.9}", self.avg_kl);
        let _ = writeln!(s, "AVG_HD\t{:.9}", self.avg_hd);
        let _ = writeln!(s, "AVG_WD\t{:.9}", self.avg_wd);
        s
    }
}

/// Per-level metrics of `generated[i]` against `originals[i]`, pooled by
/// the original's green level and weighted by sample count.
pub fn evaluate_pairs(originals: &[SynthSample], generated: &[ConfigTensor]) -> urbanflow::Result<MetricReport> {
    if originals.len() != generated.len() {
        return Err(Error::Data(format!(
            "{} originals vs {} generations",
            originals.len(),
            generated.len()
        )));
    }
    let mut by_level: BTreeMap<usize, (Vec<ConfigTensor>, Vec<ConfigTensor>)> = BTreeMap::new();
    for (o, g) in originals.iter().zip(generated) {
        let entry = by_level.entry(o.green_level).or_default();
        entry.0.push(o.config.clone());
        entry.1.push(g.clone());
    }
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for level in 0..GUIDANCE_LEVELS {
        let Some((orig, gen)) = by_level.get(&level) else {
            warnings.push(format!("green level {level} has no samples and is excluded"));
            continue;
        };
        let p = to_distribution(orig, DEFAULT_SMOOTHING)?;
        let q = to_distribution(gen, DEFAULT_SMOOTHING)?;
        rows.push(LevelRow {
            level,
            count: orig.len(),
            kl: kl_div(&p, &q)?,
            hd: hellinger(&p, &q)?,
            wd: wasserstein_1d(&p, &q)?,
        });
        pairs.push((p, q, orig.len() as f64));
    }
    Ok(MetricReport {
        rows,
        avg_kl: avg_weighted(kl_div, &pairs)?,
        avg_hd: avg_weighted(hellinger, &pairs)?,
        avg_wd: avg_weighted(wasserstein_1d, &pairs)?,
        warnings,
    })
}

/// One generation per sample, conditioned on that sample's own
/// information vector.
pub fn evaluate_bundle(bundle: &ModelBundle, samples: &[SynthSample]) -> CliResult<MetricReport> {
    let (fusion, flow) = bundle.stage_two()?;
    let mut rng: ChaCha8Rng = stream_rng(bundle.config.seed, Stream::Evaluation);
    let mut generated = Vec::with_capacity(samples.len());
    for s in samples {
        let e = s.info_vector()?;
        generated.push(generate(&bundle.zone, fusion, flow, &e, &mut rng, false)?.config.config);
    }
    Ok(evaluate_pairs(samples, &generated)?)
}

pub fn cmd_evaluate(ckpt: &Path, data: &Path, out: &Path) -> CliResult<MetricReport> {
    let bundle = checkpoint::load(ckpt)?;
    let samples = load_dataset(&bundle.config, data)?;
    let report = evaluate_bundle(&bundle, &samples)?;
    std::fs::write(out, report.to_text(&bundle.config))?;
    Ok(report)
}
