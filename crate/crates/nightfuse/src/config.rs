//! Experiment configuration: one JSON document describing data sources,
//! both training runs, the sampler matrix, evaluation band, and benchmark
//! sweep. Unknown keys are rejected with the offending key path, and a
//! minimal document (even `{}`) expands to a fully defaulted config.

use crate::dataset::SynthParams;
use crate::error::{Error, Result};
use crate::network::{CheckpointConfig, NetConfig, Objective, PrecisionMode};
use crate::sample::{Method, SamplerSpec};
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Where the paired scene comes from and how it is preprocessed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Radiance grid file for the condition sensor; when absent the
    /// synthetic generator below is used for both roles.
    pub cond_path: Option<PathBuf>,
    /// Digital-number grid file for the target sensor.
    pub target_path: Option<PathBuf>,
    pub synth: SynthParams,
    /// Radiance percentile mapped to the top of the DN range when scaling.
    pub scale_percentile: f64,
    /// Condition DN floor below which joint-background pixels are zeroed.
    pub filter_floor: f32,
    /// Validation patches held out from the extracted pairs.
    pub n_val: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            cond_path: None,
            target_path: None,
            synth: SynthParams::default(),
            scale_percentile: 99.5,
            filter_floor: 1.0,
            n_val: 32,
        }
    }
}

/// Architecture, schedule, and both optimization runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub noise: TrainConfig,
    pub velocity: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            net: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            noise: TrainConfig { objective: Objective::Noise, ..TrainConfig::default() },
            velocity: TrainConfig { objective: Objective::Velocity, ..TrainConfig::default() },
        }
    }
}

/// One sampler request; `steps` defaults per method when omitted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub eta: f64,
}

impl MethodSpec {
    /// Concrete sampler spec under the given schedule horizon and seed.
    pub fn resolve(&self, t: usize, seed: u64) -> SamplerSpec {
        let mut s = SamplerSpec::new(self.method, t, seed);
        if let Some(n) = self.steps {
            s.steps = n;
        }
        s.eta = self.eta;
        s
    }
}

fn default_methods() -> Vec<MethodSpec> {
    [Method::Ddim, Method::Lcm, Method::EdmHeun, Method::PfEuler, Method::PfHeun, Method::FmEuler]
        .into_iter()
        .map(|method| MethodSpec { method, steps: None, eta: 0.0 })
        .collect()
}

/// The sampler matrix to fuse with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub methods: Vec<MethodSpec>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { methods: default_methods() }
    }
}

/// Spectral comparison band, as inclusive-exclusive wavenumber-bin bounds;
/// when omitted the top quartile of bins is used.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub band_lo: Option<usize>,
    pub band_hi: Option<usize>,
}

/// Benchmark sweep settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub enabled: bool,
    pub precisions: Vec<PrecisionMode>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { enabled: true, precisions: vec![PrecisionMode::Full32, PrecisionMode::Half16] }
    }
}

/// Full experiment description; the unit of reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; every stage derives its randomness from this by label.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Omit wall-clock fields from metrics so reruns are byte-identical.
    pub deterministic: bool,
    pub data: DataSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            deterministic: false,
            data: DataSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checkpoint configuration for the given objective's run.
    pub fn checkpoint_config(&self, objective: Objective) -> CheckpointConfig {
        CheckpointConfig { net: self.train.net, schedule: self.train.schedule, objective }
    }

    /// Cross-field consistency checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        for (label, path) in [("data.cond_path", &self.data.cond_path), ("data.target_path", &self.data.target_path)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{label}: no such file {}", p.display())));
                }
            }
        }
        if self.data.cond_path.is_some() != self.data.target_path.is_some() {
            return Err(Error::Config("data: cond_path and target_path must be given together".into()));
        }
        if !(self.data.scale_percentile > 0.0 && self.data.scale_percentile <= 100.0) {
            return Err(Error::Config("data.scale_percentile must be in (0, 100]".into()));
        }
        if self.data.n_val == 0 {
            return Err(Error::Config("data.n_val must be at least 1".into()));
        }
        if self.data.cond_path.is_none() {
            self.data.synth.validate().map_err(|e| Error::Config(format!("data.synth: {e}")))?;
            let coarse = self.data.synth.fine_size / 2;
            let patch = self.train.net.patch;
            let tiles = ((coarse / patch) * (coarse / patch)) as usize;
            if self.data.n_val >= tiles {
                return Err(Error::Config(format!(
                    "data.n_val {} must be below the {} available patches",
                    self.data.n_val, tiles
                )));
            }
        }
        self.train.net.validate().map_err(|e| Error::Config(format!("train.net: {e}")))?;
        self.train.schedule.build().map_err(|e| Error::Config(format!("train.schedule: {e}")))?;
        for (label, tc, obj) in [
            ("train.noise", &self.train.noise, Objective::Noise),
            ("train.velocity", &self.train.velocity, Objective::Velocity),
        ] {
            tc.validate().map_err(|e| Error::Config(format!("{label}: {e}")))?;
            if tc.objective != obj {
                return Err(Error::Config(format!("{label}.objective must be {obj:?}")));
            }
        }
        if self.sample.methods.is_empty() {
            return Err(Error::Config("sample.methods must not be empty".into()));
        }
        let t = self.train.schedule.steps;
        for m in &self.sample.methods {
            m.resolve(t, self.seed).validate().map_err(|e| Error::Config(format!("sample.methods: {e}")))?;
        }
        if let (Some(lo), Some(hi)) = (self.eval.band_lo, self.eval.band_hi) {
            if lo >= hi {
                return Err(Error::Config("eval.band_lo must be below eval.band_hi".into()));
            }
        }
        if self.bench.enabled && self.bench.precisions.is_empty() {
            return Err(Error::Config("bench.precisions must not be empty when bench is enabled".into()));
        }
        Ok(())
    }
}

/// Parses and validates a JSON experiment document; unknown keys are
/// rejected with their full key path.
pub fn validate_config(document: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}
