use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::sample_loss;
use super::optim::{early_stop_check, optimizer_step, scheduler_step, OptimState};
use super::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{ModelWeights, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's minibatches.
    pub train_loss: f64,
    pub val_mpjpe: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// `None` when training aborted.
    pub stop_reason: Option<StopReason>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mpjpe,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_mpjpe, e.lr);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "epoch,train_loss,val_mpjpe,lr" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "expected header `epoch,train_loss,val_mpjpe,lr`".into(),
                })
            }
        }
        let mut epochs = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: idx + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("bad number"));
            let epoch: usize = f[0].trim().parse().map_err(|_| bad("bad epoch"))?;
            if epochs.last().is_some_and(|e: &EpochRecord| e.epoch >= epoch) {
                return Err(bad("epoch indices must increase"));
            }
            epochs.push(EpochRecord {
                epoch,
                train_loss: num(f[1])?,
                val_mpjpe: num(f[2])?,
                lr: num(f[3])?,
            });
        }
        Ok(Self {
            epochs,
            stop_reason: None,
        })
    }

    /// Index of the first epoch with the lowest validation metric.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.epochs.iter().enumerate() {
            if best.map_or(true, |b| e.val_mpjpe < self.epochs[b].val_mpjpe) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    /// Weights of the epoch with the lowest validation metric.
    pub weights: ModelWeights,
    pub history: TrainHistory,
}

/// A failed run, with the epochs completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} epochs: {error}", history.epochs.len())]
pub struct FitAbort {
    #[source]
    pub error: Error,
    pub history: TrainHistory,
}

fn batch_gradient(w: &ModelWeights, train: &Dataset, batch: &[usize], cfg: &TrainConfig) -> Result<(f64, Params)> {
    let per_sample: Vec<Result<(f64, Params)>> = batch
        .par_iter()
        .map(|&i| sample_loss(&train.samples[i], w, cfg.loss_space))
        .collect();
    // Reduce in batch order so results do not depend on thread count.
    let mut total = 0.0;
    let mut grad = w.params.zeros_like();
    for r in per_sample {
        let (loss, g) = r?;
        total += loss;
        grad.add_scaled(&g, 1.0);
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok((total, grad))
}

fn check_inputs(model: &ModelWeights, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "training and validation sets must be non-empty".into(),
        ));
    }
    for d in [train, val] {
        if d.n_max > model.config.n_max {
            return Err(Error::Config(format!(
                "dataset has up to {} joints, model supports {}",
                d.n_max, model.config.n_max
            )));
        }
        if d.samples.iter().any(|s| s.s3d_gt.is_none()) {
            return Err(Error::Validation(
                "every training and validation sample needs 3D ground truth".into(),
            ));
        }
    }
    Ok(())
}

/// Minibatch training with a per-epoch validation pass. Returns the weights
/// of the best validation epoch.
pub fn fit(
    model: ModelWeights,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> std::result::Result<FitOutput, FitAbort> {
    let mut history = TrainHistory::default();
    if let Err(error) = check_inputs(&model, train, val, cfg) {
        return Err(FitAbort { error, history });
    }
    let mut w = model;
    let mut st = OptimState::new(&w.params, cfg.lr0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ModelWeights)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = st.lr;
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = batch_gradient(&w, train, batch, cfg).and_then(|(loss, g)| {
                optimizer_step(&mut w, &g, &mut st)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => total += loss,
                Err(error) => return Err(FitAbort { error, history }),
            }
        }
        let val_mpjpe = match evaluate(&w, val, cfg.loss_space) {
            Ok(r) if r.overall.mpjpe.is_finite() => r.overall.mpjpe,
            Ok(_) => {
                let error = Error::NumericFault("validation metric".into());
                return Err(FitAbort { error, history });
            }
            Err(error) => return Err(FitAbort { error, history }),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_mpjpe,
            lr,
        });
        log::info!(
            "epoch {epoch}: train_loss {:.6e} val_mpjpe {val_mpjpe:.6e} lr {lr:.3e}",
            total / train.len() as f64
        );
        if best.as_ref().map_or(true, |(b, _)| val_mpjpe < *b) {
            best = Some((val_mpjpe, w.clone()));
        }
        scheduler_step(&mut st, val_mpjpe, cfg);
        if early_stop_check(&history, cfg) {
            history.stop_reason = Some(super::StopReason::EarlyStop);
            break;
        }
    }
    if history.stop_reason.is_none() {
        history.stop_reason = Some(StopReason::MaxEpochs);
    }
    let weights = best.map(|(_, w)| w).expect("at least one epoch ran");
    Ok(FitOutput { weights, history })
}
