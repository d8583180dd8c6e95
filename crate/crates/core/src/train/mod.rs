//! Training: masked point loss, Adam updates, plateau learning-rate decay,
//! early stopping and finite-difference gradient checks.

mod fit;
mod gradcheck;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

pub use fit::{fit, EpochRecord, FitAbort, FitOutput, StopReason, TrainHistory};
pub use gradcheck::{gradient_check, GradCheckReport, GRAD_CHECK_FLOOR, GRAD_CHECK_THRESHOLD};
pub use loss::{mse_loss, sample_loss, sample_loss_value};
pub use optim::{early_stop_check, optimizer_step, scheduler_step, OptimState, LR_FLOOR, MIN_IMPROVEMENT};

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{ModelConfig, RffSettings};

/// Where the loss compares prediction and ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// After the optimal rotation and scale onto the reference.
    #[default]
    Aligned,
    /// Canonical output compared directly, after centering.
    CanonicalNoOnp,
}

impl LossSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            LossSpace::Aligned => "aligned",
            LossSpace::CanonicalNoOnp => "canonical_no_onp",
        }
    }
}

impl std::str::FromStr for LossSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(LossSpace::Aligned),
            "canonical_no_onp" => Ok(LossSpace::CanonicalNoOnp),
            _ => Err(Error::Config(format!(
                "unknown loss space `{s}` (expected aligned or canonical_no_onp)"
            ))),
        }
    }
}

impl std::fmt::Display for LossSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_space: LossSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            plateau_patience: 20,
            plateau_factor: 0.5,
            early_stop_patience: 30,
            max_epochs: 200,
            batch_size: 32,
            seed: 0,
            loss_space: LossSpace::Aligned,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a training run is configured with: the optimizer schedule,
/// the network shape and its initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// When unset the training data decides.
    pub n_max: Option<usize>,
    pub rff: RffSettings,
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            n_max: None,
            rff: RffSettings::default(),
            init_seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a flat `key = value` file. Training keys are the
    /// [`TrainConfig`] field names; model keys are `n_max`, `dim`, `heads`,
    /// `layers`, `ff_mult`, `attn_mode`, `encoding`, `rff_sigma`,
    /// `rff_seed`, `phase_dist` and `init_seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "lr0" => c.train.lr0 = e.parsed()?,
                "plateau_patience" => c.train.plateau_patience = e.parsed()?,
                "plateau_factor" => c.train.plateau_factor = e.parsed()?,
                "early_stop_patience" => c.train.early_stop_patience = e.parsed()?,
                "max_epochs" => c.train.max_epochs = e.parsed()?,
                "batch_size" => c.train.batch_size = e.parsed()?,
                "seed" => c.train.seed = e.parsed()?,
                "loss_space" => c.train.loss_space = e.parsed()?,
                "n_max" => c.n_max = Some(e.parsed()?),
                "dim" => c.model.dim = e.parsed()?,
                "heads" => c.model.heads = e.parsed()?,
                "layers" => c.model.layers = e.parsed()?,
                "ff_mult" => c.model.ff_mult = e.parsed()?,
                "attn_mode" => c.model.attn_mode = e.parsed()?,
                "encoding" => c.model.encoding = e.parsed()?,
                "rff_sigma" => c.rff.sigma = e.parsed()?,
                "rff_seed" => c.rff.seed = e.parsed()?,
                "phase_dist" => c.rff.phase_dist = e.parsed()?,
                "init_seed" => c.init_seed = e.parsed()?,
                _ => return Err(e.unknown()),
            }
        }
        c.train.validate()?;
        Ok(c)
    }
}
