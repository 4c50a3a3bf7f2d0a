//! Run configuration: one TOML file covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vstain_core::data::SyntheticCorpusSpec;
use vstain_core::guidance::GuidanceConfig;
use vstain_core::metrics::MetricsConfig;
use vstain_core::mi::CriticTrainConfig;
use vstain_core::rng;
use vstain_core::score::{ScoreArch, ScoreTrainConfig};
use vstain_core::{Error, NoiseSchedule, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed. Each stage derives its own seed from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: SyntheticCorpusSpec,
    pub schedule: ScheduleConfig,
    pub score: ScoreConfig,
    pub critic: CriticTrainConfig,
    pub guidance: GuidanceConfig,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: PathsConfig::default(),
            data: SyntheticCorpusSpec::default(),
            schedule: ScheduleConfig::default(),
            score: ScoreConfig::default(),
            critic: CriticTrainConfig::default(),
            guidance: GuidanceConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Everything a command writes lands under this directory.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { run_dir: PathBuf::from("run") }
    }
}

/// Linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub arch: ScoreArch,
    pub train: ScoreTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// `N` values; each cell also starts the chain at `S = N`.
    pub guided_steps: Vec<usize>,
    pub t0_prime: Vec<usize>,
    /// Stain only the first `limit` eval sources (all when unset).
    pub limit: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { guided_steps: vec![100, 300, 500], t0_prime: vec![10, 40, 80], limit: None }
    }
}

/// Seed streams for the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 1,
    Score = 2,
    Critic = 3,
    Stain = 4,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                Self::from_toml_str(&text).map_err(|e| match e {
                    Error::Config(msg) => config_err(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.data.validate()?;
        let sched = self.schedule()?;
        self.score.arch.validate()?;
        if self.score.arch.in_channels != 3 {
            return Err(config_err("score.arch.in_channels must be 3 for RGB tiles"));
        }
        if self.data.image_size % 4 != 0 {
            return Err(config_err(format!("data.image_size must be a multiple of 4, got {}", self.data.image_size)));
        }
        if self.score.train.batch_size == 0 {
            return Err(config_err("score.train.batch_size must be >= 1"));
        }
        self.critic.arch.validate()?;
        if self.critic.images_per_iteration == 0 || self.critic.pairs < 2 {
            return Err(config_err("critic needs images_per_iteration >= 1 and pairs >= 2"));
        }
        self.guidance.validate(&sched)?;
        if self.guidance.info.patch_size != self.critic.arch.patch_size {
            return Err(config_err(format!(
                "guidance.info.patch_size ({}) must equal critic.arch.patch_size ({})",
                self.guidance.info.patch_size, self.critic.arch.patch_size
            )));
        }
        if !(self.metrics.od_threshold.is_finite() && self.metrics.od_threshold >= 0.0) {
            return Err(config_err("metrics.od_threshold must be finite and >= 0"));
        }
        if self.sweep.guided_steps.is_empty() || self.sweep.t0_prime.is_empty() {
            return Err(config_err("sweep grid axes must be non-empty"));
        }
        if self.sweep.limit == Some(0) {
            return Err(config_err("sweep.limit must be >= 1 when set"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        rng::derive_seed(self.seed, stage as u64)
    }

    pub fn corpus_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { seed: self.stage_seed(Stage::Data), ..self.data.clone() }
    }

    pub fn score_train(&self) -> ScoreTrainConfig {
        ScoreTrainConfig { seed: self.stage_seed(Stage::Score), ..self.score.train }
    }

    pub fn critic_train(&self) -> CriticTrainConfig {
        CriticTrainConfig { seed: self.stage_seed(Stage::Critic), ..self.critic }
    }
}

/// Fixed file layout under the run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn score_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/score.ckpt")
    }

    pub fn critic_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/critic.ckpt")
    }

    pub fn score_trace(&self) -> PathBuf {
        self.root.join("logs/score_loss.tsv")
    }

    pub fn critic_trace(&self) -> PathBuf {
        self.root.join("logs/critic_bound.tsv")
    }

    pub fn stained(&self) -> PathBuf {
        self.root.join("stained")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn effective_config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}
