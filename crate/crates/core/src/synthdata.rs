//! Synthetic planning corpus with a known conditional structure.
//!
//! Zone maps come from seeded multi-source region growing. Each cell is empty
//! with probability `0.10 + 0.18·green_level`; otherwise its POI counts are
//! Poisson draws from [`POI_RATES`] for the cell's zone type, redrawn onto a
//! single category (chosen proportionally to the rates) if every draw is zero,
//! so "empty" is exactly the designated empty cells.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config_flow::ConfigTensor;
use crate::error::{Error, Result};
use crate::numerics::GridTensor;
use crate::zone_flow::ZoneMap;

pub const GUIDANCE_LEVELS: usize = 5;
pub const CONTEXT_NODES: usize = 8;
pub const MAX_CATEGORIES: usize = 20;
pub const FORMAT_VERSION: u32 = 1;

pub const CATEGORY_NAMES: [&str; MAX_CATEGORIES] = [
    "road",
    "car service",
    "car repair",
    "motorbike service",
    "food service",
    "shopping",
    "daily life service",
    "recreation service",
    "medical service",
    "lodging",
    "tourist attraction",
    "real estate",
    "government place",
    "education",
    "transportation",
    "finance",
    "company",
    "road furniture",
    "specific address",
    "public service",
];

pub const ZONE_TYPE_NAMES: [&str; 6] = ["residential", "commercial", "industrial", "education", "park", "civic"];

/// Mean POI count per non-empty cell, by zone type (rows, cycled when M > 6)
/// and category (columns). Commercial zones carry almost no vehicle-related
/// categories; industrial zones carry almost no shopping or finance.
#[rustfmt::skip]
pub const POI_RATES: [[f64; MAX_CATEGORIES]; 6] = [
    [0.6, 0.30, 0.20, 0.20, 1.5, 1.2, 2.0, 0.5, 0.6, 0.3, 0.10, 1.8, 0.2, 0.8, 0.6, 0.30, 0.4, 0.5, 0.9, 0.7],
    [0.8, 0.05, 0.02, 0.02, 3.0, 3.5, 2.2, 1.5, 0.5, 1.2, 0.40, 0.6, 0.3, 0.2, 1.0, 2.20, 2.5, 0.6, 0.8, 0.4],
    [1.0, 2.50, 2.80, 1.80, 0.6, 0.3, 0.4, 0.1, 0.2, 0.2, 0.05, 0.2, 0.2, 0.1, 1.2, 0.10, 1.6, 0.8, 0.5, 0.3],
    [0.4, 0.10, 0.10, 0.10, 1.0, 0.6, 0.8, 0.6, 0.5, 0.3, 0.20, 0.3, 0.4, 3.2, 0.5, 0.20, 0.3, 0.4, 0.6, 1.0],
    [0.5, 0.05, 0.05, 0.05, 0.4, 0.2, 0.2, 1.8, 0.2, 0.3, 1.60, 0.1, 0.2, 0.2, 0.3, 0.05, 0.1, 1.2, 0.3, 0.8],
    [0.7, 0.20, 0.10, 0.10, 0.8, 0.5, 0.7, 0.3, 1.5, 0.4, 0.30, 0.3, 2.6, 0.6, 0.8, 1.00, 0.8, 0.6, 0.7, 2.2],
];

pub fn poi_rate(zone_type: usize, category: usize) -> f64 {
    POI_RATES[zone_type % POI_RATES.len()][category]
}

pub fn empty_probability(green_level: usize) -> f64 {
    0.10 + 0.18 * green_level as f64
}

/// Eight neighbouring regions, each described by a normalized POI
/// histogram followed by two socioeconomic scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGraph {
    pub nodes: Vec<Vec<f64>>,
}

impl ContextGraph {
    pub fn feature_len(&self) -> usize {
        self.nodes.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: u64,
    pub green_level: usize,
    pub context: ContextGraph,
    pub zones: ZoneMap,
    pub config: ConfigTensor,
}

impl SynthSample {
    /// `[embed_context | encode_guidance]` as a `1×D` vector.
    pub fn info_vector(&self) -> Result<GridTensor> {
        let s = embed_context(&self.context)?;
        let g = encode_guidance(self.green_level)?;
        let mut data = s.into_data();
        data.extend(g.into_data());
        GridTensor::matrix(1, data.len(), data)
    }
}

/// Width of the context embedding for `P` categories.
pub fn context_dim(p: usize) -> usize {
    2 * (p + 2)
}

/// Width of the urban information vector for `P` categories.
pub fn info_dim(p: usize) -> usize {
    context_dim(p) + GUIDANCE_LEVELS
}

fn check_params(n: usize, m: usize, p: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::Config(format!("grid side {n} < 4")));
    }
    if m < 2 || m > n * n {
        return Err(Error::Config(format!("zone type count {m} outside 2..={}", n * n)));
    }
    if !(2..=MAX_CATEGORIES).contains(&p) {
        return Err(Error::Config(format!(
            "category count {p} outside 2..={MAX_CATEGORIES}"
        )));
    }
    Ok(())
}

/// Multi-source region growing: `M` distinct seed cells, one per label, then
/// repeatedly claim a random frontier cell for the region that reached it.
fn grow_regions(n: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let cells = n * n;
    let mut labels = vec![usize::MAX; cells];
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    let neighbors = |cell: usize| {
        let (r, c) = (cell / n, cell % n);
        [
            (r > 0).then(|| cell - n),
            (r + 1 < n).then(|| cell + n),
            (c > 0).then(|| cell - 1),
            (c + 1 < n).then(|| cell + 1),
        ]
        .into_iter()
        .flatten()
    };
    let mut seeds = rand::seq::index::sample(rng, cells, m).into_vec();
    seeds.sort_unstable();
    // Seeds are claimed up front so no region can overrun another's seed.
    for (label, &cell) in seeds.iter().enumerate() {
        labels[cell] = label;
    }
    for (label, &cell) in seeds.iter().enumerate() {
        frontier.extend(neighbors(cell).map(|nb| (nb, label)));
    }
    while !frontier.is_empty() {
        let (cell, label) = frontier.swap_remove(rng.random_range(0..frontier.len()));
        if labels[cell] != usize::MAX {
            continue;
        }
        labels[cell] = label;
        frontier.extend(neighbors(cell).map(|nb| (nb, label)));
    }
    labels
}

fn draw_counts(zone: usize, p: usize, rng: &mut impl Rng) -> Vec<u32> {
    let rates: Vec<f64> = (0..p).map(|k| poi_rate(zone, k)).collect();
    let mut counts: Vec<u32> = rates
        .iter()
        .map(|&l| Poisson::new(l).expect("positive rate").sample(rng) as u32)
        .collect();
    if counts.iter().all(|&c| c == 0) {
        let total: f64 = rates.iter().sum();
        let mut t = rng.random::<f64>() * total;
        let k = rates
            .iter()
            .position(|&l| {
                t -= l;
                t < 0.0
            })
            .unwrap_or(p - 1);
        counts[k] = 1;
    }
    counts
}

fn context_graph(labels: &[usize], m: usize, p: usize, green_level: usize, rng: &mut impl Rng) -> ContextGraph {
    let mut composition = vec![0.0; m];
    for &l in labels {
        composition[l] += 1.0 / labels.len() as f64;
    }
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let nodes = (0..CONTEXT_NODES)
        .map(|_| {
            if rng.random::<f64>() < 0.05 {
                return vec![0.0; p + 2];
            }
            let jitter: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let jsum: f64 = jitter.iter().sum();
            let mix: Vec<f64> = composition
                .iter()
                .zip(&jitter)
                .map(|(c, j)| 0.6 * c + 0.4 * j / jsum)
                .collect();
            let mut hist: Vec<f64> = (0..p)
                .map(|k| {
                    let rate: f64 = mix.iter().enumerate().map(|(z, w)| w * poi_rate(z, k)).sum();
                    rate * (0.8 + 0.4 * rng.random::<f64>())
                })
                .collect();
            let total: f64 = hist.iter().sum();
            hist.iter_mut().for_each(|h| *h /= total);
            hist.push(green_level as f64 / 4.0 + noise.sample(rng));
            hist.push(mix.get(1).copied().unwrap_or(0.0) + noise.sample(rng));
            hist
        })
        .collect();
    ContextGraph { nodes }
}

/// Deterministic synthetic sample for `seed`. The id is left at 0 for the
/// caller to assign.
pub fn generate_sample(seed: u64, n: usize, m: usize, p: usize, green_level: usize) -> Result<SynthSample> {
    check_params(n, m, p)?;
    if green_level >= GUIDANCE_LEVELS {
        return Err(Error::Config(format!(
            "green level {green_level} outside 0..{GUIDANCE_LEVELS}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = grow_regions(n, m, &mut rng);
    let empty = empty_probability(green_level);
    let mut counts = Vec::with_capacity(n * n * p);
    for &zone in &labels {
        if rng.random::<f64>() < empty {
            counts.extend(std::iter::repeat_n(0, p));
        } else {
            counts.extend(draw_counts(zone, p, &mut rng));
        }
    }
    let context = context_graph(&labels, m, p, green_level, &mut rng);
    Ok(SynthSample {
        id: 0,
        green_level,
        context,
        zones: ZoneMap::new(n, labels, m)?,
        config: ConfigTensor::new(n, p, counts)?,
    })
}

/// Elementwise mean then elementwise max of the eight node features, `1×2F`.
pub fn embed_context(g: &ContextGraph) -> Result<GridTensor> {
    if g.nodes.len() != CONTEXT_NODES {
        return Err(Error::Data(format!(
            "context graph has {} nodes, expected {CONTEXT_NODES}",
            g.nodes.len()
        )));
    }
    let f = g.feature_len();
    if g.nodes.iter().any(|v| v.len() != f) {
        return Err(Error::Data("context nodes have ragged feature lengths".into()));
    }
    let mut mean = vec![0.0; f];
    let mut max = vec![f64::NEG_INFINITY; f];
    for node in &g.nodes {
        for (j, &v) in node.iter().enumerate() {
            mean[j] += v / CONTEXT_NODES as f64;
            max[j] = max[j].max(v);
        }
    }
    mean.extend(max);
    GridTensor::matrix(1, 2 * f, mean)
}

pub fn encode_guidance(level: usize) -> Result<GridTensor> {
    if level >= GUIDANCE_LEVELS {
        return Err(Error::Data(format!(
            "guidance level {level} outside 0..{GUIDANCE_LEVELS}"
        )));
    }
    let mut v = vec![0.0; GUIDANCE_LEVELS];
    v[level] = 1.0;
    GridTensor::matrix(1, GUIDANCE_LEVELS, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
}

impl DatasetHeader {
    pub fn new(n: usize, m: usize, p: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n,
            m,
            p,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    green_level: usize,
    context: Vec<Vec<f64>>,
    zones: Vec<usize>,
    config: Vec<u32>,
}

/// A header plus samples. An empty file has no header.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: Option<DatasetHeader>,
    pub samples: Vec<SynthSample>,
}

pub fn write_dataset_to(w: &mut impl Write, header: &DatasetHeader, samples: &[SynthSample]) -> Result<()> {
    let line = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "{line}")?;
    for s in samples {
        let rec = Record {
            id: s.id,
            green_level: s.green_level,
            context: s.context.nodes.clone(),
            zones: s.zones.labels().to_vec(),
            config: s.config.counts().to_vec(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[SynthSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, header, samples)?;
    w.flush()?;
    Ok(())
}

fn parse_record(line: &str, header: &DatasetHeader) -> std::result::Result<SynthSample, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.green_level >= GUIDANCE_LEVELS {
        return Err(format!("green level {} out of range", rec.green_level));
    }
    if rec.context.len() != CONTEXT_NODES || rec.context.iter().any(|n| n.len() != header.p + 2) {
        return Err(format!(
            "context must be {CONTEXT_NODES} nodes of {} features",
            header.p + 2
        ));
    }
    let zones = ZoneMap::new(header.n, rec.zones, header.m).map_err(|e| e.to_string())?;
    let config = ConfigTensor::new(header.n, header.p, rec.config).map_err(|e| e.to_string())?;
    Ok(SynthSample {
        id: rec.id,
        green_level: rec.green_level,
        context: ContextGraph { nodes: rec.context },
        zones,
        config,
    })
}

pub fn read_dataset_from(r: impl BufRead) -> Result<Dataset> {
    let mut header: Option<DatasetHeader> = None;
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        match &header {
            None => {
                let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno,
                    detail: e.to_string(),
                })?;
                let version = value.get("format_version").and_then(serde_json::Value::as_u64);
                if version != Some(FORMAT_VERSION as u64) {
                    return Err(Error::Format(format!(
                        "dataset format version {version:?}, expected {FORMAT_VERSION}"
                    )));
                }
                let h: DatasetHeader = serde_json::from_value(value).map_err(|e| Error::Parse {
                    line: lineno,
                    detail: e.to_string(),
                })?;
                header = Some(h);
            }
            Some(h) => {
                let s = parse_record(&line, h).map_err(|detail| Error::Parse { line: lineno, detail })?;
                samples.push(s);
            }
        }
    }
    Ok(Dataset { header, samples })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_one_hot() {
        assert_eq!(encode_guidance(0).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_guidance(4).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(encode_guidance(5), Err(Error::Data(_))));
    }

    #[test]
    fn region_growing_covers_every_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let labels = grow_regions(7, 4, &mut rng);
            assert!(labels.iter().all(|&l| l < 4));
            for m in 0..4 {
                assert!(labels.contains(&m), "every seed keeps at least its own cell");
            }
        }
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(matches!(generate_sample(0, 3, 2, 5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_sample(0, 8, 1, 5, 0), Err(Error::Config(_))));
        assert!(matches!(generate_sample(0, 8, 4, 21, 0), Err(Error::Config(_))));
        assert!(matches!(generate_sample(0, 8, 4, 5, 5), Err(Error::Config(_))));
    }
}
