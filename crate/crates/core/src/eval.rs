//! Joint-error metrics and per-category evaluation reports. Errors are in
//! the units of the dataset's 3D ground truth.

use std::fmt::Write as _;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::keypoints::{preprocess, KeypointSet3D, PreprocessRecord, Sample, VisibilityMask};
use crate::model::{forward, ModelWeights};
use crate::procrustes::align;
use crate::train::LossSpace;

fn check(s_p: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<()> {
    if s_p.len() != s_r.len() || s_p.len() != m.len() {
        return Err(Error::Dimension(format!(
            "metric inputs disagree: {} / {} rows, mask {}",
            s_p.len(),
            s_r.len(),
            m.len()
        )));
    }
    if m.count_visible() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Mean Euclidean distance over visible joints.
pub fn mpjpe(s_p: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<f64> {
    check(s_p, s_r, m)?;
    let (a, b) = (s_p.coords(), s_r.coords());
    let total: f64 = m
        .visible_indices()
        .map(|i| (0..3).map(|k| (a[[i, k]] - b[[i, k]]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / m.count_visible() as f64)
}

/// MPJPE after removing translation (visible centroids), rotation and
/// scale from the prediction.
pub fn pa_mpjpe(s_p: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<f64> {
    check(s_p, s_r, m)?;
    let (p, r) = (s_p.centered(m)?, s_r.centered(m)?);
    let fit = align(&p, &r, m)?;
    mpjpe(&fit.aligned, &r, m)
}

/// One sample pushed through the full inference pipeline.
#[derive(Debug, Clone)]
pub struct Lifted {
    /// Network output centered on the visible joints and rescaled by the
    /// 2D normalization factor; occluded rows are zero.
    pub canonical: KeypointSet3D,
    pub record: PreprocessRecord,
    /// Final prediction, present when ground truth is available.
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub shape: KeypointSet3D,
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    /// Ground truth centered on the visible joints.
    pub reference: KeypointSet3D,
}

/// Runs the model and, with ground truth, the loss-space-specific final
/// step: alignment onto the centered reference, or the centered canonical
/// shape as is.
pub fn lift_sample(sample: &Sample, w: &ModelWeights, space: LossSpace) -> Result<Lifted> {
    let out = forward(sample, w)?;
    let (_, record) = preprocess(sample)?;
    let canonical = KeypointSet3D::new(out.centered(&sample.mask)?.into_inner() * record.scale)?;
    let prediction = match &sample.s3d_gt {
        None => None,
        Some(gt) => {
            let reference = gt.centered(&sample.mask)?;
            Some(match space {
                LossSpace::Aligned => {
                    let fit = align(&canonical, &reference, &sample.mask)?;
                    Prediction {
                        shape: fit.aligned,
                        rotation: fit.rotation,
                        scale: fit.scale,
                        reference,
                    }
                }
                LossSpace::CanonicalNoOnp => Prediction {
                    shape: canonical.clone(),
                    rotation: Matrix3::identity(),
                    scale: 1.0,
                    reference,
                },
            })
        }
    };
    Ok(Lifted {
        canonical,
        record,
        prediction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    /// Error of the pipeline's final prediction.
    pub mpjpe: f64,
    /// Error of the canonical shape after a full similarity alignment.
    pub pa_mpjpe: f64,
}

pub fn sample_metrics(lifted: &Lifted, mask: &VisibilityMask) -> Result<SampleMetrics> {
    let p = lifted
        .prediction
        .as_ref()
        .ok_or_else(|| Error::Validation("evaluation needs 3D ground truth".into()))?;
    metrics_from_shapes(&lifted.canonical, &p.shape, &p.reference, mask)
}

pub fn metrics_from_shapes(
    canonical: &KeypointSet3D,
    prediction: &KeypointSet3D,
    reference: &KeypointSet3D,
    mask: &VisibilityMask,
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        mpjpe: mpjpe(prediction, reference, mask)?,
        pa_mpjpe: pa_mpjpe(canonical, reference, mask)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub units: String,
    pub categories: Vec<CategoryReport>,
    /// Sample-weighted means over all categories.
    pub overall: CategoryReport,
}

impl EvalReport {
    /// Aggregates per-sample metrics; categories keep first-appearance
    /// order.
    pub fn from_samples(items: &[(String, SampleMetrics)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Validation("cannot evaluate an empty dataset".into()));
        }
        let mut categories: Vec<CategoryReport> = Vec::new();
        for (cat, m) in items {
            let entry = match categories.iter_mut().position(|c| &c.category == cat) {
                Some(i) => &mut categories[i],
                None => {
                    categories.push(CategoryReport {
                        category: cat.clone(),
                        mpjpe: 0.0,
                        pa_mpjpe: 0.0,
                        n_samples: 0,
                    });
                    categories.last_mut().expect("just pushed")
                }
            };
            entry.mpjpe += m.mpjpe;
            entry.pa_mpjpe += m.pa_mpjpe;
            entry.n_samples += 1;
        }
        let mut overall = CategoryReport {
            category: "overall".into(),
            mpjpe: 0.0,
            pa_mpjpe: 0.0,
            n_samples: 0,
        };
        for c in &mut categories {
            overall.mpjpe += c.mpjpe;
            overall.pa_mpjpe += c.pa_mpjpe;
            overall.n_samples += c.n_samples;
            c.mpjpe /= c.n_samples as f64;
            c.pa_mpjpe /= c.n_samples as f64;
        }
        overall.mpjpe /= overall.n_samples as f64;
        overall.pa_mpjpe /= overall.n_samples as f64;
        Ok(Self {
            units: "dataset units".into(),
            categories,
            overall,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self
            .categories
            .iter()
            .map(|c| c.category.len())
            .chain(["category".len(), "overall".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>12}  {:>9}",
            "category", "mpjpe", "pa_mpjpe", "samples"
        );
        for c in self.categories.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12.6}  {:>12.6}  {:>9}",
                c.category, c.mpjpe, c.pa_mpjpe, c.n_samples
            );
        }
        let _ = writeln!(out, "(errors in {})", self.units);
        out
    }
}

/// Per-sample metrics in dataset order.
pub fn evaluate_samples(w: &ModelWeights, d: &Dataset, space: LossSpace) -> Result<Vec<SampleMetrics>> {
    d.samples
        .par_iter()
        .map(|s| sample_metrics(&lift_sample(s, w, space)?, &s.mask))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

pub fn evaluate(w: &ModelWeights, d: &Dataset, space: LossSpace) -> Result<EvalReport> {
    if d.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let metrics = evaluate_samples(w, d, space)?;
    let items: Vec<(String, SampleMetrics)> = d
        .samples
        .iter()
        .zip(metrics)
        .map(|(s, m)| (s.category_id.clone(), m))
        .collect();
    EvalReport::from_samples(&items)
}
