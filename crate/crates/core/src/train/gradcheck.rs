use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{sample_loss, sample_loss_value};
use super::LossSpace;
use crate::error::{Error, Result};
use crate::keypoints::Sample;
use crate::model::ModelWeights;

/// Largest relative error a tensor may show and still pass.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;
/// Lower bound of the relative-error denominator. Coordinates whose true
/// gradient is zero (for instance attention scores that cancel inside a
/// softmax) leave only round-off in the difference quotient, so the floor
/// sits well above that noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;
/// Tensors larger than this are checked on a seeded random subset of this
/// many coordinates.
pub const MAX_COORDS_PER_TENSOR: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>7}  {:>12}\n", "tensor", "coords", "max_rel_err");
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>12.3e}\n",
                t.name, t.coords_checked, t.max_rel_error
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e}: {}\n",
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / GRAD_CHECK_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compares the analytic gradient of the training loss against a
/// five-point central difference `(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`.
pub fn gradient_check(w: &ModelWeights, sample: &Sample, eps: f64, space: LossSpace) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let (_, grads) = sample_loss(sample, w, space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probe = w.clone();
    let mut tensors = Vec::new();
    for (t, (name, g)) in grads.named().into_iter().enumerate() {
        let g: Vec<f64> = g.iter().copied().collect();
        let coords: Vec<usize> = if g.len() > MAX_COORDS_PER_TENSOR {
            let mut idx = sample_indices(&mut rng, g.len(), MAX_COORDS_PER_TENSOR).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..g.len()).collect()
        };
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let mut at = |h: f64| -> Result<f64> {
                let original = {
                    let mut views = probe.params.named_mut();
                    let v = views[t].1.iter_mut().nth(k).expect("coordinate in range");
                    let o = *v;
                    *v = o + h;
                    o
                };
                let value = sample_loss_value(sample, &probe, space);
                *probe.params.named_mut()[t]
                    .1
                    .iter_mut()
                    .nth(k)
                    .expect("coordinate in range") = original;
                value
            };
            let fd = (at(-2.0 * eps)? - 8.0 * at(-eps)? + 8.0 * at(eps)? - at(2.0 * eps)?) / (12.0 * eps);
            worst = worst.max(relative_error(g[k], fd));
        }
        tensors.push(TensorCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < GRAD_CHECK_THRESHOLD,
        tensors,
        max_rel_error,
    })
}
