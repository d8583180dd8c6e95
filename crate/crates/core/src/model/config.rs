use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which attention branches a layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    /// Graph attention and self-attention side by side, each `D/2` wide.
    #[default]
    Hybrid,
    GaOnly,
    MhsaOnly,
}

impl std::str::FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(AttnMode::Hybrid),
            "ga_only" => Ok(AttnMode::GaOnly),
            "mhsa_only" => Ok(AttnMode::MhsaOnly),
            other => Err(Error::Config(format!("unknown attn_mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    #[default]
    Tpe,
    Learnable,
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpe" => Ok(Encoding::Tpe),
            "learnable" => Ok(Encoding::Learnable),
            other => Err(Error::Config(format!("unknown encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_max: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub attn_mode: AttnMode,
    pub encoding: Encoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            dim: 64,
            heads: 4,
            layers: 4,
            ff_mult: 4,
            attn_mode: AttnMode::Hybrid,
            encoding: Encoding::Tpe,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("dim must be even, got {}", self.dim)));
        }
        if self.heads == 0 || self.dim % (2 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by 2 * heads ({})",
                self.dim,
                2 * self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be positive".into()));
        }
        Ok(())
    }

    /// Width emitted by each attention branch: `D/2` when both branches
    /// are concatenated, `D` when a single branch runs alone.
    pub fn branch_width(&self) -> usize {
        match self.attn_mode {
            AttnMode::Hybrid => self.dim / 2,
            AttnMode::GaOnly | AttnMode::MhsaOnly => self.dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.branch_width() / self.heads
    }
}
