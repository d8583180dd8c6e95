use ndarray::Zip;

use super::fit::TrainHistory;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelWeights, Params};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// The plateau schedule never lowers the learning rate below this.
pub const LR_FLOOR: f64 = 1e-6;
/// A validation metric counts as improved only when it drops by at least
/// this much below the best value so far.
pub const MIN_IMPROVEMENT: f64 = 1e-8;

/// Adam moments plus the plateau-schedule bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first: Params,
    pub second: Params,
    pub step: u64,
    pub lr: f64,
    pub best_metric: f64,
    pub bad_epochs: usize,
}

impl OptimState {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            lr,
            best_metric: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

/// One bias-corrected Adam update at the current learning rate.
pub fn optimizer_step(w: &mut ModelWeights, grads: &Params, st: &mut OptimState) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NumericFault(name));
    }
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let lr = st.lr;
    let tensors = w
        .params
        .named_mut()
        .into_iter()
        .zip(grads.named())
        .zip(st.first.named_mut())
        .zip(st.second.named_mut());
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
        Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
    }
    Ok(())
}

/// Feeds one epoch's validation metric to the plateau schedule.
pub fn scheduler_step(st: &mut OptimState, val_metric: f64, cfg: &TrainConfig) {
    if val_metric < st.best_metric - MIN_IMPROVEMENT {
        st.best_metric = val_metric;
        st.bad_epochs = 0;
        return;
    }
    st.bad_epochs += 1;
    if st.bad_epochs >= cfg.plateau_patience {
        st.lr = (st.lr * cfg.plateau_factor).max(LR_FLOOR);
        st.bad_epochs = 0;
    }
}

/// True once the best validation metric is `early_stop_patience` epochs
/// old.
pub fn early_stop_check(history: &TrainHistory, cfg: &TrainConfig) -> bool {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (i, e) in history.epochs.iter().enumerate() {
        if e.val_mpjpe < best - MIN_IMPROVEMENT {
            best = e.val_mpjpe;
            best_idx = i;
        }
    }
    match history.epochs.len() {
        0 => false,
        n => n - 1 - best_idx >= cfg.early_stop_patience,
    }
}
