use ndarray::Array2;

use super::LossSpace;
use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet3D, Sample, VisibilityMask};
use crate::model::{forward, forward_traced, ModelWeights, Params};
use crate::procrustes::{align, rotate};

/// Mean squared point distance over visible joints.
pub fn mse_loss(s_p: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<f64> {
    if s_p.len() != s_r.len() || s_p.len() != m.len() {
        return Err(Error::Dimension(format!(
            "loss inputs disagree: {} / {} rows, mask {}",
            s_p.len(),
            s_r.len(),
            m.len()
        )));
    }
    let n_vis = m.count_visible();
    if n_vis == 0 {
        return Err(Error::EmptyMask);
    }
    let (a, b) = (s_p.coords(), s_r.coords());
    let total: f64 = m
        .visible_indices()
        .map(|i| (0..3).map(|k| (a[[i, k]] - b[[i, k]]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / n_vis as f64)
}

/// Ground truth centered on the visible joints and divided by the 2D
/// normalization factor, so targets live in the network's output units.
fn target(sample: &Sample, scale: f64) -> Result<KeypointSet3D> {
    let gt = sample
        .s3d_gt
        .as_ref()
        .ok_or_else(|| Error::Validation("training sample has no 3D ground truth".into()))?;
    KeypointSet3D::new(gt.centered(&sample.mask)?.into_inner() / scale)
}

struct Compared {
    loss: f64,
    /// Gradient with respect to the raw network output.
    upstream: Array2<f64>,
}

fn compare(shape: &KeypointSet3D, target: &KeypointSet3D, mask: &VisibilityMask, space: LossSpace) -> Result<Compared> {
    let centered = shape.centered(mask)?;
    let (pred, rotation, scale) = match space {
        LossSpace::Aligned => {
            let fit = align(&centered, target, mask)?;
            (fit.aligned, Some(fit.rotation), fit.scale)
        }
        LossSpace::CanonicalNoOnp => (centered, None, 1.0),
    };
    let loss = mse_loss(&pred, target, mask)?;
    let n_vis = mask.count_visible() as f64;
    let mut d_pred = Array2::zeros(pred.coords().raw_dim());
    for i in mask.visible_indices() {
        for k in 0..3 {
            d_pred[[i, k]] = 2.0 * (pred.coords()[[i, k]] - target.coords()[[i, k]]) / n_vis;
        }
    }
    // Rotation and scale are optimal for this very loss, so their
    // sensitivities drop out of the first-order gradient.
    let d_centered = match rotation {
        Some(r) => rotate(&d_pred, &r.transpose()) * scale,
        None => d_pred,
    };
    let mut mean = [0.0; 3];
    for i in mask.visible_indices() {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += d_centered[[i, k]] / n_vis;
        }
    }
    let mut upstream = Array2::zeros(d_centered.raw_dim());
    for i in mask.visible_indices() {
        for k in 0..3 {
            upstream[[i, k]] = d_centered[[i, k]] - mean[k];
        }
    }
    Ok(Compared { loss, upstream })
}

/// Training loss of one sample and its gradient for every trainable tensor.
pub fn sample_loss(sample: &Sample, w: &ModelWeights, space: LossSpace) -> Result<(f64, Params)> {
    let f = forward_traced(sample, w)?;
    let t = target(sample, f.record.scale)?;
    let c = compare(&f.shape, &t, &sample.mask, space)?;
    if !c.loss.is_finite() {
        return Err(Error::NumericFault("loss".into()));
    }
    let grads = f.trace.backward(w, &c.upstream)?;
    Ok((c.loss, grads))
}

/// Training loss of one sample, forward pass only.
pub fn sample_loss_value(sample: &Sample, w: &ModelWeights, space: LossSpace) -> Result<f64> {
    let (_, record) = crate::keypoints::preprocess(sample)?;
    let shape = forward(sample, w)?;
    let t = target(sample, record.scale)?;
    Ok(compare(&shape, &t, &sample.mask, space)?.loss)
}
