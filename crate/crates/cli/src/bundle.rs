//! The set of models a checkpoint carries.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use urbanflow::config_flow::ConfigFlowModel;
use urbanflow::flow_layers::{FlowLayer, FlowStack};
use urbanflow::fusion::FusionModule;
use urbanflow::numerics::{GridTensor, ParameterStore};
use urbanflow::zone_flow::ZoneFlowModel;
use urbanflow::{Error, Result};

use crate::config::RunConfig;

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    ZoneInit = 1,
    FusionInit = 2,
    ConfigInit = 3,
    ZoneTraining = 4,
    ConfigTraining = 5,
    Evaluation = 6,
    Reference = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Zone flow only.
    Zone,
    /// Zone flow, fusion and configuration flow.
    Full,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Zone => "zone",
            Stage::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zone" => Ok(Stage::Zone),
            "full" => Ok(Stage::Full),
            other => Err(Error::Format(format!("unknown checkpoint stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: RunConfig,
    pub zone: ZoneFlowModel,
    pub stage_two: Option<(FusionModule, ConfigFlowModel)>,
    /// Training stream, saved so a run can resume where it stopped.
    pub rng: ChaCha8Rng,
}

impl ModelBundle {
    /// Identity-initialized zone flow for `config`.
    pub fn zone_only(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let zone = ZoneFlowModel::new(
            config.zone_dim(),
            config.info_dim(),
            config.m,
            &config.zone_settings(),
            &mut stream_rng(config.seed, Stream::ZoneInit),
        )?;
        Ok(Self {
            config: config.clone(),
            zone,
            stage_two: None,
            rng: stream_rng(config.seed, Stream::ZoneTraining),
        })
    }

    /// Adds freshly initialized fusion and configuration models.
    pub fn add_stage_two(&mut self) -> Result<()> {
        let c = &self.config;
        let fusion = FusionModule::new(
            c.n,
            c.m,
            c.info_dim(),
            &c.fusion_settings(),
            &mut stream_rng(c.seed, Stream::FusionInit),
        )?;
        let flow = ConfigFlowModel::new(
            c.n,
            c.p,
            fusion.output_dim(),
            &c.config_settings(),
            &mut stream_rng(c.seed, Stream::ConfigInit),
        )?;
        self.stage_two = Some((fusion, flow));
        self.rng = stream_rng(c.seed, Stream::ConfigTraining);
        Ok(())
    }

    /// Identity-initialized models for both stages.
    pub fn full(config: &RunConfig) -> Result<Self> {
        let mut b = Self::zone_only(config)?;
        b.add_stage_two()?;
        Ok(b)
    }

    pub fn stage(&self) -> Stage {
        if self.stage_two.is_some() {
            Stage::Full
        } else {
            Stage::Zone
        }
    }

    pub fn stage_two(&self) -> Result<(&FusionModule, &ConfigFlowModel)> {
        self.stage_two
            .as_ref()
            .map(|(f, c)| (f, c))
            .ok_or_else(|| Error::Pipeline("checkpoint holds only the zone stage".into()))
    }

    /// Every parameter and running statistic, sorted by name.
    pub fn tensors(&self) -> Vec<(String, GridTensor)> {
        let mut out = BTreeMap::new();
        let mut add_store = |s: &ParameterStore| {
            for (k, v) in s.iter() {
                out.insert(k.clone(), v.clone());
            }
        };
        add_store(&self.zone.params);
        if let Some((f, c)) = &self.stage_two {
            add_store(&f.params);
            add_store(&c.params);
        }
        stack_stats("zone", self.zone.stack(), &mut out);
        if let Some((_, c)) = &self.stage_two {
            stack_stats("config", c.stack(), &mut out);
        }
        out.into_iter().collect()
    }

    /// Overwrites every tensor from `named`, which must match the bundle's
    /// manifest exactly.
    pub fn load_tensors(&mut self, mut named: BTreeMap<String, GridTensor>) -> Result<()> {
        let expected = self.tensors();
        if expected.len() != named.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                expected.len()
            )));
        }
        for (name, t) in &expected {
            let got = named
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut take_store = |s: &mut ParameterStore| {
            for (k, v) in s.iter_mut() {
                *v = named.remove(k.as_str()).expect("checked above");
            }
        };
        take_store(&mut self.zone.params);
        if let Some((f, c)) = &mut self.stage_two {
            take_store(&mut f.params);
            take_store(&mut c.params);
        }
        set_stack_stats("zone", self.zone.stack_mut(), &mut named);
        if let Some((_, c)) = &mut self.stage_two {
            set_stack_stats("config", c.stack_mut(), &mut named);
        }
        Ok(())
    }
}

fn stat_names(prefix: &str, layer: usize) -> (String, String) {
    (
        format!("{prefix}.stack.l{layer}.running_mean"),
        format!("{prefix}.stack.l{layer}.running_var"),
    )
}

fn stack_stats(prefix: &str, stack: &FlowStack, out: &mut BTreeMap<String, GridTensor>) {
    for (i, layer) in stack.layers().iter().enumerate() {
        if let FlowLayer::BatchNorm(bn) = layer {
            let (m, v) = stat_names(prefix, i);
            out.insert(m, GridTensor::vector(bn.stats.running_mean.clone()));
            out.insert(v, GridTensor::vector(bn.stats.running_var.clone()));
        }
    }
}

fn set_stack_stats(prefix: &str, stack: &mut FlowStack, named: &mut BTreeMap<String, GridTensor>) {
    for (i, layer) in stack.layers_mut().iter_mut().enumerate() {
        if let FlowLayer::BatchNorm(bn) = layer {
            let (m, v) = stat_names(prefix, i);
            bn.stats.running_mean = named.remove(&m).expect("checked").into_data();
            bn.stats.running_var = named.remove(&v).expect("checked").into_data();
        }
    }
}
