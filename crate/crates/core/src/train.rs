//! Mini-batch training with Adam and early stopping on validation loss.

use std::fmt::Write as _;

use crate::error::{GlatError, Result};
use crate::metrics::{argmax, evaluate, KappaWeighting, MetricsReport};
use crate::model::{backward_gradients, finite_diff_check, predict_proba, total_loss, ModelParams, PreparedBag};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{derive_seed, SplitMix64};
use crate::NUM_CLASSES;

/// Gradient-check tolerance applied when `fd_check` is on.
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Absolute disagreement below which a parameter passes regardless of its
/// relative error. Gradients that are exactly zero (a zero classifier on a
/// class-balanced batch) otherwise fail on central-difference round-off.
pub const FD_ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping (>= 1).
    pub patience: usize,
    /// Weight of the smoothness penalty.
    pub alpha: f64,
    pub seed: u64,
    /// Verify analytic gradients on the first batch before training.
    pub fd_check: bool,
    pub kappa_weighting: KappaWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            alpha: 0.01,
            seed: 0,
            fd_check: false,
            kappa_weighting: KappaWeighting::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(GlatError::Config("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(GlatError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(GlatError::Config("patience must be >= 1".into()));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(GlatError::Config("alpha must be >= 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_kappa: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub slide_id: String,
    pub probs: [f64; NUM_CLASSES],
    pub pred: usize,
    pub label: usize,
}

pub fn predict(bags: &[PreparedBag], params: &ModelParams) -> Result<Vec<Prediction>> {
    bags.iter()
        .map(|b| {
            let probs = predict_proba(b, params)?;
            Ok(Prediction {
                slide_id: b.slide_id.clone(),
                probs,
                pred: argmax(&probs),
                label: b.label.index(),
            })
        })
        .collect()
}

pub fn evaluate_predictions(preds: &[Prediction], weighting: KappaWeighting) -> Result<MetricsReport> {
    let probs: Vec<[f64; NUM_CLASSES]> = preds.iter().map(|p| p.probs).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    evaluate(&probs, &labels, weighting)
}

pub fn train_loop(train: &[PreparedBag], val: &[PreparedBag], init: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(GlatError::invalid("training and validation splits must be non-empty"));
    }
    let adam = cfg.adam();
    let mut params = init;

    if cfg.fd_check {
        let first = &train[..cfg.batch_size.min(train.len())];
        let report = finite_diff_check(first, &params, cfg.alpha, FD_STEP)?;
        let failing = report
            .entries
            .iter()
            .find(|e| e.max_rel_error >= FD_TOLERANCE && e.max_abs_error >= FD_ABS_FLOOR);
        if let Some(e) = failing {
            return Err(GlatError::GradientCheck {
                param: e.name.to_string(),
                max_rel_error: e.max_rel_error,
            });
        }
    }

    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        SplitMix64::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedBag> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (report, grads) = backward_gradients(&batch, &params, cfg.alpha)?;
            if !report.total.is_finite() {
                return Err(GlatError::Diverged { epoch, loss: report.total });
            }
            loss_sum += report.total * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = total_loss(val, &params, cfg.alpha)?.total;
        if !val_loss.is_finite() {
            return Err(GlatError::Diverged { epoch, loss: val_loss });
        }
        let metrics = evaluate_predictions(&predict(val, &params)?, cfg.kappa_weighting)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_auc: metrics.auc,
            val_kappa: metrics.kappa,
            val_accuracy: metrics.accuracy,
        });

        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_auc,val_kappa";

pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_loss, r.val_auc, r.val_kappa);
    }
    out
}

pub const PREDICTIONS_HEADER: &str = "slide_id,p0,p1,p2,p3,pred,label";

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for p in preds {
        let _ = write!(out, "{}", p.slide_id);
        for v in p.probs {
            let _ = write!(out, ",{v:?}");
        }
        let _ = writeln!(out, ",{},{}", p.pred, p.label);
    }
    out
}

/// Parses a predictions CSV back into records.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_HEADER) {
        return Err(GlatError::parse(1, "malformed predictions header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + NUM_CLASSES {
                return Err(GlatError::parse(line_no, "malformed predictions row"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| GlatError::parse(line_no, "malformed probability"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| GlatError::parse(line_no, "malformed class"));
            let mut probs = [0.0; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                probs[c] = num(f[1 + c])?;
            }
            Ok(Prediction {
                slide_id: f[0].to_string(),
                probs,
                pred: int(f[1 + NUM_CLASSES])?,
                label: int(f[2 + NUM_CLASSES])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EmbeddingTable, GradeLabel, PatchRecord, WsiBag};
    use crate::graph::Sigma;
    use crate::model::ModelConfig;

    /// Bags whose patches sit around a class-specific centre.
    fn toy_bags(n: usize, seed: u64) -> Vec<PreparedBag> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|s| {
                let label = s % NUM_CLASSES;
                let records = (0..4)
                    .map(|i| PatchRecord {
                        id: i,
                        x: i as u32,
                        y: 0,
                        embedding: (0..4)
                            .map(|k| if k == label { 3.0 } else { 0.0 } + 0.3 * rng.next_normal())
                            .collect(),
                    })
                    .collect();
                let t = EmbeddingTable::new(format!("toy{s}"), 4, records).unwrap();
                PreparedBag::new(&WsiBag::new(GradeLabel::new(label).unwrap(), t).unwrap(), Sigma::Median).unwrap()
            })
            .collect()
    }

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig { d: 4, d_k: 4, d_v: 4, m_max: 4, ..Default::default() }, 3).unwrap()
    }

    #[test]
    fn patience_zero_rejected() {
        let bags = toy_bags(8, 1);
        let cfg = TrainConfig { patience: 0, ..Default::default() };
        assert!(matches!(train_loop(&bags, &bags, model(), &cfg), Err(GlatError::Config(_))));
        assert!(train_loop(&[], &bags, model(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn deterministic_history_and_learning() {
        let train = toy_bags(32, 2);
        let val = toy_bags(12, 3);
        let cfg = TrainConfig { lr: 0.02, max_epochs: 30, batch_size: 8, fd_check: true, ..Default::default() };
        let a = train_loop(&train, &val, model(), &cfg).unwrap();
        let b = train_loop(&train, &val, model(), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let last = a.history.last().unwrap();
        assert!(last.val_accuracy >= 0.9, "{last:?}");
        assert!(a.history[0].val_loss > a.history[a.best_epoch - 1].val_loss);
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        // A huge learning rate makes validation loss bounce, triggering the stop.
        let train = toy_bags(16, 4);
        let val = toy_bags(8, 5);
        let cfg = TrainConfig { lr: 5.0, max_epochs: 60, patience: 2, batch_size: 4, ..Default::default() };
        let out = train_loop(&train, &val, model(), &cfg).unwrap();
        assert!(out.history.len() < 60);
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
        let reval = total_loss(&val, &out.params, cfg.alpha).unwrap().total;
        assert_eq!(reval, best);
        assert_eq!(out.history.len(), out.best_epoch + 2);
    }

    #[test]
    fn csv_formats() {
        let h = vec![EpochRecord { epoch: 1, train_loss: 1.5, val_loss: 1.25, val_auc: 0.5, val_kappa: 0.0, val_accuracy: 0.25 }];
        assert_eq!(format_history(&h), "epoch,train_loss,val_loss,val_auc,val_kappa\n1,1.5,1.25,0.5,0.0\n");
        let preds = predict(&toy_bags(3, 9), &model()).unwrap();
        let text = format_predictions(&preds);
        assert!(text.starts_with(PREDICTIONS_HEADER));
        assert_eq!(parse_predictions(&text).unwrap(), preds);
    }
}
