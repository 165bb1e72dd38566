//! Binary checkpoint format.
//!
//! ```text
//! magic "UFLOWCK" | version u8 | header length u64 LE | header JSON | payload
//! ```
//!
//! The payload is every tensor of the manifest, in manifest order, as
//! little-endian `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use urbanflow::numerics::GridTensor;

use crate::bundle::{ModelBundle, Stage};
use crate::config::RunConfig;

pub const MAGIC: &[u8; 7] = b"UFLOWCK";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = MAGIC.len() + 1 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads version {expected}")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("payload holds {actual} bytes, manifest needs {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] urbanflow::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u8,
    stage: String,
    config: BTreeMap<String, String>,
    manifest: Vec<(String, Vec<usize>)>,
    rng: RngState,
}

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let tensors = bundle.tensors();
    let header = Header {
        format_version: VERSION,
        stage: bundle.stage().as_str().to_string(),
        config: bundle.config.entries(),
        manifest: tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        rng: RngState {
            seed: bundle.rng.get_seed().to_vec(),
            stream: bundle.rng.get_stream(),
            word_pos: bundle.rng.get_word_pos().to_string(),
        },
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated("preamble".into()));
    }
    let version = bytes[MAGIC.len()];
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[MAGIC.len() + 1..PREAMBLE].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {len} bytes")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::Version {
            found: header.format_version,
            expected: VERSION,
        });
    }
    let payload = &bytes[header_end..];
    let expected: usize = header
        .manifest
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(CheckpointError::LengthMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let config = RunConfig::from_entries(&header.config)?;
    let mut bundle = match Stage::parse(&header.stage)? {
        Stage::Zone => ModelBundle::zone_only(&config)?,
        Stage::Full => ModelBundle::full(&config)?,
    };
    let mut named = BTreeMap::new();
    let mut offset = 0;
    for (name, shape) in header.manifest {
        let count: usize = shape.iter().product();
        let values = payload[offset..offset + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += count * 8;
        named.insert(name, GridTensor::new(shape, values)?);
    }
    bundle.load_tensors(named)?;
    let seed: [u8; 32] = header
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| CheckpointError::Header("rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| CheckpointError::Header("bad rng word position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    bundle.rng = rng;
    Ok(bundle)
}

pub fn save(path: &Path, bundle: &ModelBundle) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(bundle))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelBundle, CheckpointError> {
    decode(&std::fs::read(path)?)
}
