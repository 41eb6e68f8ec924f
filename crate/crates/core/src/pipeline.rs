//! Experiment orchestration shared by the CLI and the test suites: patch
//! selection, seeded splits, training and cross-validation.
//!
//! Every random stream is derived from a config seed and, where relevant,
//! the slide's position in the dataset, so results do not depend on thread
//! scheduling.

use rayon::prelude::*;

use crate::config::{Config, Selection};
use crate::data::WsiBag;
use crate::error::{GlatError, Result};
use crate::irm::{irm_run, IrmOutcome};
use crate::metrics::MetricsReport;
use crate::model::{ModelParams, PreparedBag};
use crate::provider::{local_extract, make_frozen_projections, FeatureProviderSpec};
use crate::rng::{derive_seed, SplitMix64};
use crate::train::{evaluate_predictions, predict, train_loop, Prediction, TrainOutcome};

/// Sub-stream indices under the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_FOLDS: u64 = 4;
const STREAM_RANDOM_SELECTION: u64 = 5;

/// Applies the configured feature provider.
pub fn extract(bag: &WsiBag, cfg: &Config) -> Result<WsiBag> {
    let spec = FeatureProviderSpec {
        kind: cfg.provider,
        seed: cfg.provider_seed,
        out_dim: cfg.provider_dim.unwrap_or(bag.patches.d()),
    };
    WsiBag::new(bag.label, local_extract(&spec, &bag.patches)?)
}

/// IRM over one slide; `index` is the slide's dataset position.
pub fn irm_select(bag: &WsiBag, cfg: &Config, index: usize) -> Result<IrmOutcome> {
    let proj = make_frozen_projections(cfg.irm_seed, bag.patches.d(), cfg.irm_d_k, cfg.irm_d_v)?;
    let t = cfg.t.min(bag.patches.len());
    irm_run(&bag.patches, &proj, cfg.m, t, derive_seed(cfg.irm_seed, index as u64), cfg.score_mode)
}

/// Ids of the patches handed to the model, sorted ascending.
pub fn select_ids(bag: &WsiBag, cfg: &Config, index: usize) -> Result<Vec<u64>> {
    match cfg.selection {
        Selection::Irm => Ok(irm_select(bag, cfg, index)?.state.selected_ids),
        Selection::Random => {
            let mut ids = bag.patches.ids();
            let seed = derive_seed(derive_seed(cfg.seed, STREAM_RANDOM_SELECTION), index as u64);
            SplitMix64::new(seed).shuffle(&mut ids);
            ids.truncate(cfg.m);
            ids.sort_unstable();
            Ok(ids)
        }
    }
}

/// Provider, selection and graph construction for every slide, in order.
pub fn prepare_bags(bags: &[WsiBag], cfg: &Config) -> Result<Vec<PreparedBag>> {
    bags.par_iter()
        .enumerate()
        .map(|(i, bag)| {
            let bag = extract(bag, cfg)?;
            let ids = select_ids(&bag, cfg, i)?;
            let selected = WsiBag::new(bag.label, bag.patches.restrict(&ids)?)?;
            PreparedBag::new(&selected, cfg.sigma)
        })
        .collect()
}

/// Seeded shuffle of `0..n` cut into `(train, val)` with
/// `ceil(n * val_fraction)` validation items (at least one each side).
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(GlatError::invalid("need at least two slides to split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    let n_val = ((n as f64 * val_fraction).ceil() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Fold id per item: a seeded shuffle dealt round-robin into `k` folds.
pub fn fold_assignments(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(GlatError::invalid(format!("cannot form {k} folds from {n} slides")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    let mut folds = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

fn pick(bags: &[PreparedBag], idx: &[usize]) -> Vec<PreparedBag> {
    idx.iter().map(|&i| bags[i].clone()).collect()
}

fn input_dim(bags: &[PreparedBag]) -> Result<usize> {
    let d = bags.first().ok_or_else(|| GlatError::invalid("empty dataset"))?.nodes.embeddings.ncols();
    if bags.iter().any(|b| b.nodes.embeddings.ncols() != d) {
        return Err(GlatError::dims("slides have differing embedding dimensions"));
    }
    Ok(d)
}

/// Trains a freshly initialised model under `seed`.
pub fn fit(train: &[PreparedBag], val: &[PreparedBag], cfg: &Config, seed: u64) -> Result<TrainOutcome> {
    let d = input_dim(train)?;
    let init = ModelParams::init(&cfg.model_config(d), derive_seed(seed, STREAM_INIT))?;
    let mut tcfg = cfg.train_config();
    tcfg.seed = derive_seed(seed, STREAM_BATCHES);
    train_loop(train, val, init, &tcfg)
}

#[derive(Debug, Clone)]
pub struct SplitRun {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub outcome: TrainOutcome,
    pub val_predictions: Vec<Prediction>,
    pub val_metrics: MetricsReport,
}

/// One seeded train/validation run; validation metrics come from the
/// best-epoch parameters.
pub fn train_run(bags: &[PreparedBag], cfg: &Config) -> Result<SplitRun> {
    let (train_idx, val_idx) = train_val_split(bags.len(), cfg.val_fraction, derive_seed(cfg.seed, STREAM_SPLIT))?;
    let val = pick(bags, &val_idx);
    let outcome = fit(&pick(bags, &train_idx), &val, cfg, cfg.seed)?;
    let val_predictions = predict(&val, &outcome.params)?;
    let val_metrics = evaluate_predictions(&val_predictions, cfg.kappa_weighting)?;
    Ok(SplitRun {
        train_idx,
        val_idx,
        outcome,
        val_predictions,
        val_metrics,
    })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub predictions: Vec<Prediction>,
    pub metrics: MetricsReport,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct CrossvalReport {
    pub folds: Vec<FoldResult>,
}

impl CrossvalReport {
    pub fn auc(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.auc).collect()
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metrics.kappa).collect()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// K-fold cross-validation. Each fold's held-out slides are the test set;
/// the remainder is split again into train and validation for early
/// stopping. Folds run in parallel with independent derived seeds.
pub fn crossval(bags: &[PreparedBag], cfg: &Config) -> Result<CrossvalReport> {
    let assign = fold_assignments(bags.len(), cfg.folds, derive_seed(cfg.seed, STREAM_FOLDS))?;
    let folds = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let test_idx: Vec<usize> = (0..bags.len()).filter(|&i| assign[i] == k).collect();
            let rest: Vec<usize> = (0..bags.len()).filter(|&i| assign[i] != k).collect();
            let fold_seed = derive_seed(cfg.seed, 100 + k as u64);
            let (tr, va) = train_val_split(rest.len(), cfg.val_fraction, derive_seed(fold_seed, STREAM_SPLIT))?;
            let train: Vec<usize> = tr.iter().map(|&i| rest[i]).collect();
            let val: Vec<usize> = va.iter().map(|&i| rest[i]).collect();
            let outcome = fit(&pick(bags, &train), &pick(bags, &val), cfg, fold_seed)?;
            let predictions = predict(&pick(bags, &test_idx), &outcome.params)?;
            let metrics = evaluate_predictions(&predictions, cfg.kappa_weighting)?;
            Ok(FoldResult {
                fold: k,
                predictions,
                metrics,
                best_epoch: outcome.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossvalReport { folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        let (tr, va) = train_val_split(10, 0.2, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(train_val_split(10, 0.2, 5).unwrap(), (tr, va));
        assert!(train_val_split(1, 0.5, 0).is_err());
    }

    #[test]
    fn folds_are_balanced() {
        let f = fold_assignments(23, 5, 1).unwrap();
        let mut counts = [0; 5];
        f.iter().for_each(|&k| counts[k] += 1);
        assert_eq!(counts, [5, 5, 5, 4, 4]);
        assert!(fold_assignments(3, 5, 1).is_err());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
