//! Run configuration: a flat `key = value` file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use urbanflow::config_flow::{ConfigFlowSettings, JointSettings};
use urbanflow::fusion::{resolve_heads, FusionSettings};
use urbanflow::synthdata::{context_dim, info_dim, MAX_CATEGORIES};
use urbanflow::zone_flow::ZoneFlowSettings;
use urbanflow::{Error, Result};

/// Every tunable of a run. Keys in config files use the field names.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Grid side.
    pub n: usize,
    /// Zone types.
    pub m: usize,
    /// POI categories.
    pub p: usize,
    pub zone_blocks: usize,
    pub config_blocks: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Attention heads; 0 picks automatically.
    pub heads: usize,
    pub clamp: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub zone_steps: usize,
    pub config_steps: usize,
    pub lambda_zone: f64,
    pub zone_lr_scale: f64,
    pub ground_truth_zones: bool,
    pub channels: usize,
    pub convnext_depth: usize,
    pub layer_scale_init: f64,
    pub drop_path: f64,
    pub soft_sharpness: f64,
    pub use_attention: bool,
    pub use_geo: bool,
    pub use_condition_projection: bool,
    pub use_unconditional_ar: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 8,
            m: 4,
            p: 5,
            zone_blocks: 6,
            config_blocks: 4,
            hidden_width: 64,
            hidden_layers: 2,
            heads: 0,
            clamp: 5.0,
            lr: 1e-3,
            batch_size: 32,
            zone_steps: 1000,
            config_steps: 1000,
            lambda_zone: 0.1,
            zone_lr_scale: 0.1,
            ground_truth_zones: false,
            channels: 8,
            convnext_depth: 3,
            layer_scale_init: 1e-6,
            drop_path: 0.0,
            soft_sharpness: 10.0,
            use_attention: true,
            use_geo: true,
            use_condition_projection: true,
            use_unconditional_ar: true,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "n" => self.n = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "zone_blocks" => self.zone_blocks = parse(key, v)?,
            "config_blocks" => self.config_blocks = parse(key, v)?,
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "clamp" => self.clamp = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "zone_steps" => self.zone_steps = parse(key, v)?,
            "config_steps" => self.config_steps = parse(key, v)?,
            "lambda_zone" => self.lambda_zone = parse(key, v)?,
            "zone_lr_scale" => self.zone_lr_scale = parse(key, v)?,
            "ground_truth_zones" => self.ground_truth_zones = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "convnext_depth" => self.convnext_depth = parse(key, v)?,
            "layer_scale_init" => self.layer_scale_init = parse(key, v)?,
            "drop_path" => self.drop_path = parse(key, v)?,
            "soft_sharpness" => self.soft_sharpness = parse(key, v)?,
            "use_attention" => self.use_attention = parse(key, v)?,
            "use_geo" => self.use_geo = parse(key, v)?,
            "use_condition_projection" => self.use_condition_projection = parse(key, v)?,
            "use_unconditional_ar" => self.use_unconditional_ar = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("n", self.n.to_string());
        put("m", self.m.to_string());
        put("p", self.p.to_string());
        put("zone_blocks", self.zone_blocks.to_string());
        put("config_blocks", self.config_blocks.to_string());
        put("hidden_width", self.hidden_width.to_string());
        put("hidden_layers", self.hidden_layers.to_string());
        put("heads", self.heads.to_string());
        put("clamp", self.clamp.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("zone_steps", self.zone_steps.to_string());
        put("config_steps", self.config_steps.to_string());
        put("lambda_zone", self.lambda_zone.to_string());
        put("zone_lr_scale", self.zone_lr_scale.to_string());
        put("ground_truth_zones", self.ground_truth_zones.to_string());
        put("channels", self.channels.to_string());
        put("convnext_depth", self.convnext_depth.to_string());
        put("layer_scale_init", self.layer_scale_init.to_string());
        put("drop_path", self.drop_path.to_string());
        put("soft_sharpness", self.soft_sharpness.to_string());
        put("use_attention", self.use_attention.to_string());
        put("use_geo", self.use_geo.to_string());
        put("use_condition_projection", self.use_condition_projection.to_string());
        put("use_unconditional_ar", self.use_unconditional_ar.to_string());
        put("seed", self.seed.to_string());
        m
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in entries {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Effective configuration as `key = value` text.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn zone_dim(&self) -> usize {
        self.n * self.n
    }

    pub fn config_dim(&self) -> usize {
        self.n * self.n * self.p
    }

    pub fn context_dim(&self) -> usize {
        context_dim(self.p)
    }

    pub fn info_dim(&self) -> usize {
        info_dim(self.p)
    }

    pub fn resolved_heads(&self) -> Result<usize> {
        resolve_heads(self.info_dim(), self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::Config(format!("n = {} < 4", self.n)));
        }
        if self.m < 2 || self.p < 2 || self.p > MAX_CATEGORIES {
            return Err(Error::Config(format!("need m ≥ 2 and 2 ≤ p ≤ {MAX_CATEGORIES}")));
        }
        if !self.zone_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("n = {} gives an odd zone dimension", self.n)));
        }
        if self.zone_blocks == 0 || self.config_blocks == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("block counts and hidden sizes must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config("drop_path must lie in [0, 1)".into()));
        }
        if self.lambda_zone < 0.0 || self.lr <= 0.0 || self.clamp <= 0.0 {
            return Err(Error::Config("lambda_zone ≥ 0, lr > 0 and clamp > 0 required".into()));
        }
        self.resolved_heads()?;
        Ok(())
    }

    fn hidden(&self) -> Vec<usize> {
        vec![self.hidden_width; self.hidden_layers]
    }

    pub fn zone_settings(&self) -> ZoneFlowSettings {
        ZoneFlowSettings {
            blocks: self.zone_blocks,
            hidden: self.hidden(),
            clamp: self.clamp,
            condition_projection: self.use_condition_projection,
        }
    }

    pub fn fusion_settings(&self) -> FusionSettings {
        FusionSettings {
            channels: self.channels,
            depth: self.convnext_depth,
            layer_scale_init: self.layer_scale_init,
            drop_path: self.drop_path,
            heads: self.heads,
            attention: self.use_attention,
            geo: self.use_geo,
            soft_sharpness: self.soft_sharpness,
        }
    }

    pub fn config_settings(&self) -> ConfigFlowSettings {
        ConfigFlowSettings {
            blocks: self.config_blocks,
            hidden: self.hidden(),
            clamp: self.clamp,
            unconditional: self.use_unconditional_ar,
            mask_seed: self.seed,
        }
    }

    pub fn joint_settings(&self) -> JointSettings {
        JointSettings {
            lambda_zone: self.lambda_zone,
            zone_lr_scale: self.zone_lr_scale,
            ground_truth_zones: self.ground_truth_zones,
        }
    }
}
