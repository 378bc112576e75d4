//! TOML experiment configuration. Every field has a default, so an empty
//! file describes the default two-moons suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::diffengine::{Activation, ModelSpec, OutputKind, DEFAULT_FD_STEP};
use crate::domains::{self, DomainDataset, DomainShift};
use crate::error::{Error, Result};
use crate::lyapunov::PropagationMethod;
use crate::optimizers::OptimizerConfig;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each source class kept for training.
    pub data_fraction: f64,
    pub output_dir: PathBuf,
    /// Also record one row per iteration.
    pub verbose: bool,
    /// Seeds per optimizer in `compare`.
    pub repeats: usize,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    /// `aug = false` trains on the source alone.
    #[serde(serialize_with = "aug_to_toml", deserialize_with = "aug_from_toml")]
    pub aug: Option<AugConfig>,
    pub lyapunov: LyapunovConfig,
    pub domains: DomainSuite,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            data_fraction: 1.0,
            output_dir: PathBuf::from("runs"),
            verbose: false,
            repeats: 10,
            model: ModelSpec::new(vec![2, 16, 16, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy)
                .expect("valid default model"),
            optimizer: OptimizerConfig::default(),
            aug: Some(AugConfig::default()),
            lyapunov: LyapunovConfig::default(),
            domains: DomainSuite::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AugToml {
    Flag(bool),
    Table(AugConfig),
}

fn aug_to_toml<S: serde::Serializer>(aug: &Option<AugConfig>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match aug {
        Some(a) => a.serialize(s),
        None => s.serialize_bool(false),
    }
}

fn aug_from_toml<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<AugConfig>, D::Error> {
    Ok(match AugToml::deserialize(d)? {
        AugToml::Flag(false) => None,
        AugToml::Flag(true) => Some(AugConfig::default()),
        AugToml::Table(a) => Some(a),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovConfig {
    pub method: PropagationMethod,
    /// Finite-difference step for Hessian-vector products (tangent method).
    pub fd_step: f64,
    /// Draw a fresh perturbation at the start of every epoch.
    pub reset_per_epoch: bool,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            method: PropagationMethod::TwoTrajectory,
            fd_step: DEFAULT_FD_STEP,
            reset_per_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    TwoMoons { n: usize, noise: f64 },
    Blobs { n: usize, num_classes: usize, spread: f64 },
    /// A dataset previously written with `gen-data` or `save_csv`.
    Csv { path: PathBuf },
}

impl SourceSpec {
    fn generate(&self, seed: u64) -> Result<DomainDataset> {
        match self {
            SourceSpec::TwoMoons { n, noise } => domains::gen_two_moons(*n, *noise, seed),
            SourceSpec::Blobs { n, num_classes, spread } => domains::gen_blobs(*n, *num_classes, *spread, seed),
            SourceSpec::Csv { path } => domains::load_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub tag: String,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            tag: "target".into(),
            rotation_deg: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise: 0.0,
        }
    }
}

impl TargetSpec {
    pub fn shift(&self) -> DomainShift {
        DomainShift {
            rotation: self.rotation_deg.to_radians(),
            translation: self.translation.clone(),
            scale: self.scale,
            noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSuite {
    pub source: SourceSpec,
    pub targets: Vec<TargetSpec>,
}

impl Default for DomainSuite {
    /// Two moons (noise 0.1) with rotated and noised targets at 20°, 40°
    /// and 60°.
    fn default() -> Self {
        let target = |deg: f64| TargetSpec {
            tag: format!("rot{deg}"),
            rotation_deg: deg,
            noise: 0.2,
            ..TargetSpec::default()
        };
        Self {
            source: SourceSpec::TwoMoons { n: 400, noise: 0.1 },
            targets: vec![target(20.0), target(40.0), target(60.0)],
        }
    }
}

/// Source (already subsampled) and shifted targets of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub source: DomainDataset,
    pub targets: Vec<DomainDataset>,
}

impl DomainSuite {
    /// Generates the suite for a master seed. Each target is a fresh sample
    /// of the source distribution pushed through its shift.
    pub fn build(&self, master_seed: u64, data_fraction: f64) -> Result<DomainData> {
        let streams = seeds::SeedStreams::new(master_seed);
        let full = self.source.generate(streams.data)?;
        let source = full.stratified_subsample(data_fraction, streams.subsample)?;
        let targets = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let base_seed = seeds::derive_indexed(streams.targets, 2 * i as u64);
                let noise_seed = seeds::derive_indexed(streams.targets, 2 * i as u64 + 1);
                let base = match &self.source {
                    SourceSpec::Csv { .. } => full.clone(),
                    other => other.generate(base_seed)?,
                };
                domains::shift_domain(&base, &t.shift(), &t.tag, noise_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DomainData { source, targets })
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate()?;
        if let Some(aug) = &self.aug {
            aug.validate()?;
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            )));
        }
        if !(self.lyapunov.fd_step > 0.0) {
            return Err(Error::Config("lyapunov.fd_step must be positive".into()));
        }
        let mut tags: Vec<&str> = self.domains.targets.iter().map(|t| t.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("target tags must be unique".into()));
        }
        Ok(())
    }
}
