//! Training configuration (TOML).
//!
//! Paths may be overridden from the environment: `POSEXFER_MANIFEST`,
//! `POSEXFER_OUT_DIR` and `POSEXFER_EXTRACTOR_WEIGHTS`. Nothing else is read
//! from the environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{check_level, PairKind, PairingPolicy};
use crate::descriptors::{DescriptorSchedule, Segment, SegmentTable, DEFAULT_SEGMENTS};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::heatmap::DEFAULT_SIGMA;
use crate::losses::ExtractorConfig;
use crate::network::NetworkConfig;
use crate::nn::AdamConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub model: NetworkConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub segments: SegmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pairing: PairKind,
    /// Passes over all pairs the sampler may address; unbounded if absent.
    #[serde(default)]
    pub epochs: Option<u64>,
    /// Decode the next batch on a background thread.
    #[serde(default = "yes")]
    pub prefetch: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Resolution ladder, starting at 64 and doubling.
    pub levels: Vec<usize>,
    pub iterations_per_level: u64,
    /// Batch size per level (keys are levels).
    pub batch_size: BTreeMap<String, usize>,
    pub sigma: f32,
    /// Write a checkpoint every this many steps (0: level boundaries only).
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Seed of the pair sampler.
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            levels: vec![64, 128, 256, 512, 1024],
            iterations_per_level: 700_000,
            batch_size: [(64, 8), (128, 4), (256, 2), (512, 1), (1024, 1)]
                .into_iter()
                .map(|(l, b)| (l.to_string(), b))
                .collect(),
            sigma: DEFAULT_SIGMA,
            checkpoint_every: 10_000,
            log_every: 1,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn batch_size(&self, level: usize) -> Result<usize> {
        match self.batch_size.get(&level.to_string()) {
            Some(&b) if b > 0 => Ok(b),
            Some(_) => Err(Error::Config(format!("batch size at level {level} must be positive"))),
            None => Err(Error::Config(format!("no batch size configured for level {level}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub global_weight: f64,
    pub local_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            global_weight: 1.0,
            local_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Descriptor count per level (keys are levels).
    pub descriptor_counts: BTreeMap<String, usize>,
    pub table: Vec<Segment>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            descriptor_counts: DescriptorSchedule::default()
                .0
                .into_iter()
                .map(|(l, n)| (l.to_string(), n))
                .collect(),
            table: DEFAULT_SEGMENTS.to_vec(),
        }
    }
}

impl SegmentConfig {
    pub fn schedule(&self) -> Result<DescriptorSchedule> {
        self.descriptor_counts
            .iter()
            .map(|(k, &n)| {
                let l: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("descriptor level `{k}` is not a number")))?;
                check_level(l)?;
                Ok((l, n))
            })
            .collect::<Result<_>>()
            .map(DescriptorSchedule)
    }

    pub fn segment_table(&self) -> SegmentTable {
        SegmentTable {
            segments: self.table.clone(),
        }
    }
}

impl TrainConfig {
    /// Reads, applies environment overrides, resolves relative paths against
    /// the config's directory, and validates.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.apply_env_overrides(|k| std::env::var_os(k).map(PathBuf::from));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_env_overrides(&mut self, var: impl Fn(&str) -> Option<PathBuf>) {
        if let Some(p) = var("POSEXFER_MANIFEST") {
            self.data.manifest = p;
        }
        if let Some(p) = var("POSEXFER_OUT_DIR") {
            self.data.out_dir = p;
        }
        if let Some(p) = var("POSEXFER_EXTRACTOR_WEIGHTS") {
            self.extractor.weights = Some(p);
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.out_dir);
        if let Some(w) = &mut self.extractor.weights {
            fix(w);
        }
    }

    pub fn pairing_policy(&self) -> PairingPolicy {
        PairingPolicy {
            kind: self.data.pairing,
            epochs: self.data.epochs,
        }
    }

    pub fn final_level(&self) -> usize {
        *self.schedule.levels.last().expect("validated ladder")
    }

    pub fn validate(&self) -> Result<()> {
        let levels = &self.schedule.levels;
        if levels.is_empty() {
            return Err(Error::Config("schedule.levels is empty".into()));
        }
        if levels[0] != 64 {
            return Err(Error::Config("the resolution ladder starts at 64".into()));
        }
        for w in levels.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::Config(format!(
                    "ladder must double at each step, found {} after {}",
                    w[1], w[0]
                )));
            }
        }
        let schedule = self.segments.schedule()?;
        let table = self.segments.segment_table();
        table.validate()?;
        for &l in levels {
            check_level(l)?;
            self.schedule.batch_size(l)?;
            let n = schedule.count(l)?;
            if n == 0 || n > table.max_count() {
                return Err(Error::Config(format!(
                    "descriptor count {n} at level {l} exceeds what the segment table provides ({})",
                    table.max_count()
                )));
            }
        }
        if self.schedule.iterations_per_level == 0 {
            return Err(Error::Config("iterations_per_level must be positive".into()));
        }
        if !(self.schedule.sigma > 0.0) {
            return Err(Error::InvalidSigma(self.schedule.sigma));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.model.width_divisor == 0 || self.extractor.width_divisor == 0 || self.discriminator.width_divisor == 0 {
            return Err(Error::Config("width divisors must be positive".into()));
        }
        if self.discriminator.groups == 0 {
            return Err(Error::Config("discriminator.groups must be positive".into()));
        }
        if self.discriminator.lambda_adv < 0.0 || self.loss.global_weight < 0.0 || self.loss.local_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let fl = self.final_level();
        if self.discriminator.active_at(fl, fl) {
            let side = fl / 8;
            if side != crate::discriminator::DEFAULT_CROP_SIDE && !self.discriminator.allow_any_crop_side {
                return Err(Error::UnsupportedCropSide(side));
            }
        }
        Ok(())
    }
}
