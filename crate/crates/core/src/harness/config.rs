//! Benchmark run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::CsvOptions;
use crate::error::{Error, Result};
use crate::harness::baselines::Baseline;
use crate::harness::probe::ProbeConfig;
use crate::harness::synth::SynthSpec;
use crate::training::{TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Regenerated for every seed.
    Synthetic(SynthSpec),
    /// A complete table with a binary label column, split per seed.
    Csv { path: PathBuf, options: CsvOptions },
}

/// Test-time mask: the leading rows get uniform missingness at
/// `mcar_rate`, the trailing `mnar_fraction` of rows get self-masking
/// with `σ(a·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalMask {
    pub mcar_rate: f64,
    pub mnar_fraction: f64,
    pub mnar_a: f64,
    pub mnar_b: f64,
}

impl Default for EvalMask {
    fn default() -> Self {
        EvalMask {
            mcar_rate: 0.1,
            mnar_fraction: 0.5,
            mnar_a: 2.0,
            mnar_b: -0.7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "mice")]
    Mice,
    #[serde(rename = "gain")]
    Gain,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "static-fusion-0.5")]
    StaticFusion,
    #[serde(rename = "no-adaptive-fusion")]
    NoAdaptiveFusion,
    #[serde(rename = "no-mice-path")]
    NoMicePath,
    #[serde(rename = "no-gain-path")]
    NoGainPath,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Mean,
        Method::Mice,
        Method::Gain,
        Method::Full,
        Method::StaticFusion,
        Method::NoAdaptiveFusion,
        Method::NoMicePath,
        Method::NoGainPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mean => "mean",
            Method::Mice => "mice",
            Method::Gain => "gain",
            Method::Full => "full",
            Method::StaticFusion => "static-fusion-0.5",
            Method::NoAdaptiveFusion => "no-adaptive-fusion",
            Method::NoMicePath => "no-mice-path",
            Method::NoGainPath => "no-gain-path",
        }
    }

    pub fn baseline(self) -> Option<Baseline> {
        match self {
            Method::Mean => Some(Baseline::Mean),
            Method::Mice => Some(Baseline::Mice),
            Method::Gain => Some(Baseline::Gain),
            _ => None,
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Full => Some(Variant::Full),
            Method::StaticFusion => Some(Variant::StaticFusion),
            Method::NoAdaptiveFusion => Some(Variant::NoAdaptiveFusion),
            Method::NoMicePath => Some(Variant::NoMicePath),
            Method::NoGainPath => Some(Variant::NoGainPath),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub report_json: String,
    /// Flat per-run table; `None` skips it.
    pub report_csv: Option<String>,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            dir: PathBuf::from("out"),
            report_json: "report.json".into(),
            report_csv: Some("report.csv".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds `seed, seed + 1, …` are run in turn.
    pub repeats: usize,
    /// Worker threads; 1 runs everything sequentially.
    pub threads: usize,
    pub data: DataSource,
    pub test_fraction: f64,
    pub eval_mask: EvalMask,
    /// Joint model settings, also the source of the baselines' shared
    /// hyperparameters.
    pub model: TrainConfig,
    pub methods: Vec<Method>,
    pub probe: ProbeConfig,
    /// Wall-clock seconds in the report; off keeps reports byte-identical
    /// across runs.
    pub record_timing: bool,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            repeats: 1,
            threads: 1,
            data: DataSource::Synthetic(SynthSpec::default()),
            test_fraction: 0.3,
            eval_mask: EvalMask::default(),
            model: TrainConfig::default(),
            methods: vec![Method::Mean, Method::Mice, Method::Gain, Method::Full, Method::NoGainPath],
            probe: ProbeConfig::default(),
            record_timing: true,
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.threads == 0 {
            return Err(Error::Config("repeats and threads must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        let e = &self.eval_mask;
        if !(0.0..=1.0).contains(&e.mcar_rate) || !(0.0..=1.0).contains(&e.mnar_fraction) || !e.mnar_a.is_finite() || !e.mnar_b.is_finite() {
            return Err(Error::Config("eval_mask rates must be in [0, 1] and coefficients finite".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.probe.steps == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe needs positive steps and lr".into()));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.n < 4 || s.d == 0 {
                return Err(Error::Config("synthetic data needs n >= 4 and d >= 1".into()));
            }
        }
        self.model.validate()
    }
}
