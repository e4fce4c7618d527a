//! Experiment configuration, stored as versioned TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arbiter::{ArbiterKind, ArbiterRule};
use crate::engine::{Calibration, DynamicSchedule, Scope, SparsityTarget};
use crate::error::{Error, Result};
use crate::harness::data::SuiteSpec;
use crate::harness::optim::AdamConfig;
use crate::model::{Activation, ArchSpec};
use crate::saliency::Accumulation;

pub const CONFIG_SCHEMA: &str = "disparse-config/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    Dense,
    Static,
    Dynamic,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Per-task saliency with an arbiter over the shared parameters.
    Disparse,
    /// Saliency of the summed multitask loss.
    BaselineCombined,
    Random,
    Magnitude,
}

macro_rules! kebab_str {
    ($ty:ty { $($var:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$var => $s),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$var),)*
                    _ => Err(Error::Config(format!("unknown value `{s}`"))),
                }
            }
        }
    };
}

kebab_str!(Paradigm { Dense => "dense", Static => "static", Dynamic => "dynamic", Pretrained => "pretrained" });
kebab_str!(Method {
    Disparse => "disparse",
    BaselineCombined => "baseline-combined",
    Random => "random",
    Magnitude => "magnitude",
});

impl FromStr for ArbiterRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(ArbiterRule::Or),
            "majority" | "maj" => Ok(ArbiterRule::Majority),
            _ => Err(Error::Config(format!("unknown arbiter `{s}`"))),
        }
    }
}

impl fmt::Display for ArbiterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArbiterRule::Or => "or",
            ArbiterRule::Majority => "majority",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "erk" => Ok(Scope::Erk),
            _ => Err(Error::Config(format!("unknown scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha: f64,
    pub end_fraction: f64,
    pub update_interval: usize,
    /// Minibatches averaged for the regrowth gradient at each update.
    pub grow_batches: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            alpha: 0.3,
            end_fraction: 0.75,
            update_interval: 100,
            grow_batches: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Number of minibatches `N` the one-shot saliency is accumulated over.
    pub batches: usize,
    pub accumulation: Accumulation,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            batches: 50,
            accumulation: Accumulation::Signed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Masked fine-tuning length after pre-trained pruning.
    pub finetune_iterations: usize,
    /// Loss-curve sampling period.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 16,
            finetune_iterations: 1000,
            log_every: 1,
        }
    }
}

/// Trunk and head widths; the input width comes from the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub trunk_widths: Vec<usize>,
    pub head_hidden: usize,
    pub activation: Activation,
    pub mask_biases: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = ArchSpec::default();
        ArchConfig {
            trunk_widths: a.trunk_widths,
            head_hidden: a.head_hidden,
            activation: a.activation,
            mask_biases: a.mask_biases,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub paradigm: Paradigm,
    pub method: Method,
    pub sparsity: f64,
    pub scope: Scope,
    pub arbiter: ArbiterKind,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Dense checkpoint pruned by the pre-trained paradigm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub schedule: ScheduleConfig,
    pub saliency: SaliencyConfig,
    pub calibration: Calibration,
    pub train: TrainConfig,
    pub optimizer: AdamConfig,
    pub arch: ArchConfig,
    pub suite: SuiteSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.to_string(),
            paradigm: Paradigm::Static,
            method: Method::Disparse,
            sparsity: 0.9,
            scope: Scope::Erk,
            arbiter: ArbiterKind::OR,
            seeds: vec![1],
            output_dir: "runs".to_string(),
            checkpoint: None,
            schedule: ScheduleConfig::default(),
            saliency: SaliencyConfig::default(),
            calibration: Calibration::default(),
            train: TrainConfig::default(),
            optimizer: AdamConfig::default(),
            arch: ArchConfig::default(),
            suite: SuiteSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            input_dim: self.suite.input_dim,
            trunk_widths: self.arch.trunk_widths.clone(),
            head_hidden: self.arch.head_hidden,
            activation: self.arch.activation,
            mask_biases: self.arch.mask_biases,
        }
    }

    pub fn target(&self) -> Result<SparsityTarget> {
        SparsityTarget::new(self.sparsity, self.scope)
    }

    pub fn dynamic_schedule(&self) -> Result<DynamicSchedule> {
        DynamicSchedule::new(
            self.schedule.alpha,
            self.train.iterations,
            self.schedule.end_fraction,
            self.schedule.update_interval,
        )
    }

    /// Checks every field; errors here are configuration errors.
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported config schema `{}` (expected `{CONFIG_SCHEMA}`)",
                self.schema
            )));
        }
        self.suite.validate()?;
        if self.arch.head_hidden == 0 || self.arch.trunk_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 || self.train.log_every == 0 {
            return Err(Error::Config("iterations, batch_size and log_every must be positive".into()));
        }
        self.optimizer.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.paradigm != Paradigm::Dense {
            self.target().map_err(|_| Error::Config(format!("sparsity must lie in (0, 1), got {}", self.sparsity)))?;
        }
        if self.saliency.batches == 0 {
            return Err(Error::Config("saliency.batches must be positive".into()));
        }
        if !(self.calibration.tol > 0.0) {
            return Err(Error::Config("calibration.tol must be positive".into()));
        }
        if self.method == Method::Disparse && self.paradigm != Paradigm::Dense {
            self.arbiter
                .validate(self.suite.tasks.len())
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.paradigm == Paradigm::Dynamic {
            self.dynamic_schedule()?;
        } else {
            // field ranges only; a bad file fails early even when the schedule is unused
            DynamicSchedule::new(self.schedule.alpha, 1 << 20, self.schedule.end_fraction, self.schedule.update_interval)?;
        }
        if self.schedule.grow_batches == 0 {
            return Err(Error::Config("schedule.grow_batches must be positive".into()));
        }
        if self.paradigm == Paradigm::Dynamic && self.method == Method::Magnitude {
            return Err(Error::Config("the dynamic paradigm has no magnitude method".into()));
        }
        Ok(())
    }

    /// Copy of the config restricted to one seed, as recorded per run.
    pub fn for_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}
