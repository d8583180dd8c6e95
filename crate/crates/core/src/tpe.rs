//! Token positional encoding.
//!
//! Each keypoint is encoded from its own normalized coordinates through a
//! frozen random Fourier projection, so the encoding carries no joint
//! identity and commutes with any reordering of the tokens. The learnable
//! per-index embedding is kept as the correspondence-tied baseline.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet2D;

/// Distribution of the Fourier phase offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhaseDist {
    /// `Uniform[0, 2π)`, the standard random Fourier feature construction.
    #[default]
    Uniform,
    /// `Normal(0, 1)`.
    Normal,
}

impl std::str::FromStr for PhaseDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PhaseDist::Uniform),
            "normal" => Ok(PhaseDist::Normal),
            other => Err(Error::Config(format!("unknown phase_dist `{other}`"))),
        }
    }
}

/// Frozen random Fourier projection. Never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RffParams {
    /// `2 x dim/2` frequency matrix.
    pub omega: Array2<f64>,
    /// `dim/2` phase offsets.
    pub phase: Array1<f64>,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub phase_dist: PhaseDist,
}

pub fn init_rff_params(dim: usize, sigma: f64, seed: u64) -> Result<RffParams> {
    init_rff_params_with(dim, sigma, seed, PhaseDist::Uniform)
}

pub fn init_rff_params_with(dim: usize, sigma: f64, seed: u64, phase_dist: PhaseDist) -> Result<RffParams> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "encoding dimension must be even and >= 2, got {dim}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let half = dim / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freq = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let omega = Array2::from_shape_fn((2, half), |_| freq.sample(&mut rng));
    let phase = match phase_dist {
        PhaseDist::Uniform => {
            let u = Uniform::new(0.0, 2.0 * PI);
            Array1::from_shape_fn(half, |_| u.sample(&mut rng))
        }
        PhaseDist::Normal => Array1::from_shape_fn(half, |_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
    };
    Ok(RffParams {
        omega,
        phase,
        dim,
        sigma,
        seed,
        phase_dist,
    })
}

/// `sqrt(2/D) [sin(W ω + b), cos(W ω + b)]`, row by row.
pub fn encode_tpe(w_n: &KeypointSet2D, params: &RffParams) -> Result<Array2<f64>> {
    let half = params.dim / 2;
    if params.omega.dim() != (2, half) || params.phase.len() != half {
        return Err(Error::Dimension(format!(
            "RFF parameters do not match dimension {}",
            params.dim
        )));
    }
    let n = w_n.len();
    let proj = w_n.coords().dot(&params.omega) + &params.phase;
    let norm = (2.0 / params.dim as f64).sqrt();
    let mut out = Array2::zeros((n, params.dim));
    out.slice_mut(s![.., ..half]).assign(&proj.mapv(|z| norm * z.sin()));
    out.slice_mut(s![.., half..]).assign(&proj.mapv(|z| norm * z.cos()));
    Ok(out)
}

/// Correspondence-tied baseline: a per-index table plus a linear map of the
/// coordinates. Row `i` of the output depends on the index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableEmbedding {
    /// `n_max x dim`
    pub table: Array2<f64>,
    /// `2 x dim`
    pub proj: Array2<f64>,
}

impl LearnableEmbedding {
    pub fn zeros(n_max: usize, dim: usize) -> Self {
        Self {
            table: Array2::zeros((n_max, dim)),
            proj: Array2::zeros((2, dim)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }
}

pub fn encode_learnable(w_n: &KeypointSet2D, emb: &LearnableEmbedding) -> Result<Array2<f64>> {
    let n = w_n.len();
    if n > emb.capacity() {
        return Err(Error::Capacity {
            needed: n,
            capacity: emb.capacity(),
        });
    }
    Ok(w_n.coords().dot(&emb.proj) + &emb.table.slice(s![..n, ..]))
}
