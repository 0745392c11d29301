//! Run configuration, stored as TOML and snapshotted next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticStormSpec;
use crate::diffusion::{DenoiserConfig, DiffusionConfig, Sampler, ScheduleKind, Stage2Config};
use crate::error::{ensure, Error, Result};
use crate::losses::{FiblConfig, ScheduleDirection};
use crate::wavelet::Basis;
use crate::wtformer::{Stage1Config, WtformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Archive to read when `source = "archive"`.
    pub archive: Option<PathBuf>,
    /// Number of synthetic events.
    pub count: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub spec: SyntheticStormSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            archive: None,
            count: 32,
            split: [0.25, 0.0, 0.75],
            split_seed: 0,
            spec: SyntheticStormSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: [usize; 2],
    pub heads: usize,
    pub window: usize,
    pub expansion: usize,
    pub basis: Basis,
    /// WTF blocks in the coarse estimator.
    pub use_wtf: bool,
    /// Feed the visible channel.
    pub use_vis: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: [8, 16],
            heads: 2,
            window: 8,
            expansion: 2,
            basis: Basis::HaarOrthonormal,
            use_wtf: true,
            use_vis: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    #[default]
    Fixed,
    /// Low/high energy ratio of the training targets.
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    pub w_lh: f64,
    pub w_hl: f64,
    pub w_hh: f64,
    pub lambda_freq: f64,
    pub direction: ScheduleDirection,
    /// Annealing horizon T for the loss schedule; 0 uses the step count.
    pub schedule_horizon: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let f = FiblConfig::default();
        Self {
            alpha_mode: AlphaMode::Fixed,
            alpha: f.alpha,
            w_lh: f.w_lh,
            w_hl: f.w_hl,
            w_hh: f.w_hh,
            lambda_freq: 0.1,
            direction: ScheduleDirection::AsDescribed,
            schedule_horizon: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Run the refinement stage at all.
    pub enabled: bool,
    /// Inject the wavelet frequency priors.
    pub use_freq_prior: bool,
    pub train_steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampler_steps: usize,
    pub sampler: Sampler,
    pub residual: bool,
    pub widths: [usize; 2],
    pub feature_width: usize,
    pub time_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionConfig::default();
        Self {
            enabled: true,
            use_freq_prior: true,
            train_steps: d.train_steps,
            schedule: d.schedule,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            sampler_steps: d.sampler_steps,
            sampler: d.sampler,
            residual: d.residual,
            widths: [8, 16],
            feature_width: 8,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub grad_clip: f64,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_steps: 200,
            stage2_steps: 500,
            batch_size: 8,
            stage1_lr: 2e-3,
            stage2_lr: 1e-3,
            grad_clip: 1.0,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub diffusion: DiffusionSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.data.count >= 1, Validation, "data.count must be at least 1");
        if self.data.source == DataSource::Archive {
            ensure!(self.data.archive.is_some(), Config, "data.source = \"archive\" needs data.archive");
        }
        ensure!(self.run.batch_size >= 1, Config, "run.batch_size must be positive");
        ensure!(
            self.diffusion.sampler_steps >= 2 && self.diffusion.sampler_steps <= self.diffusion.train_steps,
            Config,
            "diffusion.sampler_steps must lie in [2, train_steps]"
        );
        self.fibl_base().validate()?;
        self.data.spec.validate()
    }

    pub fn input_channels(&self) -> usize {
        if self.model.use_vis {
            4
        } else {
            3
        }
    }

    pub fn wtformer(&self) -> WtformerConfig {
        WtformerConfig {
            in_channels: self.input_channels(),
            widths: self.model.widths,
            heads: self.model.heads,
            window: self.model.window,
            expansion: self.model.expansion,
            use_wtf: self.model.use_wtf,
        }
    }

    /// FIBL weights with the configured α; energy-mode α is resolved later
    /// against the training targets.
    pub fn fibl_base(&self) -> FiblConfig {
        FiblConfig {
            alpha: self.loss.alpha,
            w_lh: self.loss.w_lh,
            w_hl: self.loss.w_hl,
            w_hh: self.loss.w_hh,
            basis: self.model.basis,
        }
    }

    pub fn stage1(&self, fibl: FiblConfig) -> Stage1Config {
        Stage1Config {
            steps: self.run.stage1_steps,
            batch_size: self.run.batch_size,
            learning_rate: self.run.stage1_lr,
            grad_clip: self.run.grad_clip,
            seed: self.run.seed,
            fibl,
            direction: self.loss.direction,
            schedule_horizon: self.loss.schedule_horizon,
        }
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        let d = &self.diffusion;
        DiffusionConfig {
            train_steps: d.train_steps,
            schedule: d.schedule,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            sampler_steps: d.sampler_steps,
            sampler: d.sampler,
            residual: d.residual,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: self.input_channels(),
            widths: self.diffusion.widths,
            feature_width: self.diffusion.feature_width,
            time_dim: self.diffusion.time_dim,
            use_freq_prior: self.diffusion.use_freq_prior,
        }
    }

    pub fn stage2(&self, fibl: FiblConfig) -> Stage2Config {
        Stage2Config {
            steps: self.run.stage2_steps,
            batch_size: self.run.batch_size,
            learning_rate: self.run.stage2_lr,
            grad_clip: self.run.grad_clip,
            seed: self.run.seed.wrapping_add(2),
            lambda_freq: self.loss.lambda_freq,
            fibl,
            diffusion: self.diffusion(),
            wavelet_term: true,
        }
    }
}
