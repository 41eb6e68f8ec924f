//! The `glat` subcommands as library functions, plus exit-code mapping.
//!
//! Every command writes its artifacts under an output directory and returns
//! a one-line summary. Numbers are written in shortest round-trip form and
//! slides are processed in dataset order, so repeated runs with the same
//! config produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention::attention_received;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::data::{load_dataset, save_dataset, WsiBag};
use crate::error::{GlatError, Result};
use crate::heatmap::heatmap_export;
use crate::irm::format_trace;
use crate::model::forward_sample;
use crate::pipeline::{crossval, extract, irm_select, mean_std, prepare_bags, train_run};
use crate::synth::synth_generate;
use crate::train::{format_history, format_predictions, predict};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_DIMENSION: i32 = 5;
pub const EXIT_INVALID_DATA: i32 = 6;
pub const EXIT_NUMERICAL: i32 = 7;

pub fn exit_code(err: &GlatError) -> i32 {
    match err {
        GlatError::Io { .. } => EXIT_IO,
        GlatError::Config(_) => EXIT_CONFIG,
        GlatError::DimensionMismatch(_) => EXIT_DIMENSION,
        GlatError::Parse { .. } | GlatError::Invalid(_) => EXIT_INVALID_DATA,
        GlatError::NonFiniteGradient(_)
        | GlatError::NonFiniteUpdate(_)
        | GlatError::Diverged { .. }
        | GlatError::GradientCheck { .. } => EXIT_NUMERICAL,
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const CROSSVAL_FILE: &str = "crossval.csv";

/// Source of heatmap scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeatmapSource {
    /// Importance of every patch from the last IRM pass it joined.
    #[default]
    Irm,
    /// Attention received inside the trained layer; unselected patches get 0.
    Gla,
}

impl FromStr for HeatmapSource {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irm" => Ok(Self::Irm),
            "gla" => Ok(Self::Gla),
            other => Err(GlatError::Config(format!("unknown heatmap source {other:?}"))),
        }
    }
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| GlatError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GlatError::io(dir, e))
}

fn require<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    path.ok_or_else(|| GlatError::Config(format!("this command needs {flag}")))
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<String> {
    let slides = synth_generate(&cfg.synth)?;
    let bags: Vec<WsiBag> = slides.into_iter().map(|s| s.bag).collect();
    save_dataset(out, &bags)?;
    Ok(format!("wrote {} slides to {}", bags.len(), out.display()))
}

/// IRM on every slide: `selection.csv` (`slide_id,selected_ids` with ids
/// space-separated) and, with `traces`, one `<slide>.trace.csv` each.
pub fn cmd_select(cfg: &Config, input: &Path, out: &Path, traces: bool) -> Result<String> {
    let bags = load_dataset(input)?;
    ensure_dir(out)?;
    let outcomes = bags
        .par_iter()
        .enumerate()
        .map(|(i, b)| irm_select(&extract(b, cfg)?, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = String::from("slide_id,selected_ids\n");
    for (bag, outcome) in bags.iter().zip(&outcomes) {
        let ids: Vec<String> = outcome.state.selected_ids.iter().map(u64::to_string).collect();
        let _ = writeln!(summary, "{},{}", bag.slide_id, ids.join(" "));
        if traces {
            write(out.join(format!("{}.trace.csv", bag.slide_id)), &format_trace(&outcome.trace))?;
        }
    }
    write(out.join(SELECTION_FILE), &summary)?;
    Ok(format!("selected up to {} patches on {} slides", cfg.m, bags.len()))
}

/// One seeded train/validation run: checkpoint, history and validation
/// predictions.
pub fn cmd_train(cfg: &Config, input: &Path, out: &Path) -> Result<String> {
    let prepared = prepare_bags(&load_dataset(input)?, cfg)?;
    let run = train_run(&prepared, cfg)?;
    ensure_dir(out)?;
    save_checkpoint(&run.outcome.params, out.join(CHECKPOINT_FILE))?;
    write(out.join(HISTORY_FILE), &format_history(&run.outcome.history))?;
    write(out.join("val_predictions.csv"), &format_predictions(&run.val_predictions))?;
    let m = &run.val_metrics;
    Ok(format!(
        "best epoch {} of {}: val accuracy {:.4}, kappa {:.4}, auc {:.4}",
        run.outcome.best_epoch,
        run.outcome.history.len(),
        m.accuracy,
        m.kappa,
        m.auc
    ))
}

fn model_input_dim(cfg: &Config, bags: &[WsiBag]) -> Result<usize> {
    let d = bags.first().ok_or_else(|| GlatError::invalid("empty dataset"))?.patches.d();
    Ok(cfg.provider_dim.unwrap_or(d))
}

pub fn cmd_infer(cfg: &Config, input: &Path, checkpoint: &Path, out: &Path) -> Result<String> {
    let bags = load_dataset(input)?;
    let params = load_checkpoint(checkpoint, &cfg.model_config(model_input_dim(cfg, &bags)?))?;
    let prepared = prepare_bags(&bags, cfg)?;
    let preds = predict(&prepared, &params)?;
    ensure_dir(out)?;
    write(out.join("predictions.csv"), &format_predictions(&preds))?;
    Ok(format!("predicted {} slides", preds.len()))
}

/// One `<slide>.csv` / `<slide>.pgm` pair per slide over the full grid.
pub fn cmd_heatmap(cfg: &Config, input: &Path, out: &Path, source: HeatmapSource, checkpoint: Option<&Path>) -> Result<String> {
    let bags = load_dataset(input)?;
    ensure_dir(out)?;
    let params = match source {
        HeatmapSource::Irm => None,
        HeatmapSource::Gla => {
            let ckpt = require(checkpoint, "--checkpoint for --source gla")?;
            Some(load_checkpoint(ckpt, &cfg.model_config(model_input_dim(cfg, &bags)?))?)
        }
    };
    let per_slide = bags
        .par_iter()
        .enumerate()
        .map(|(i, bag)| -> Result<Vec<f64>> {
            let bag = extract(bag, cfg)?;
            let outcome = irm_select(&bag, cfg, i)?;
            let ids = bag.patches.ids();
            let mut scores = vec![0.0; ids.len()];
            match &params {
                None => {
                    for (id, s) in outcome.last_seen_scores() {
                        scores[ids.binary_search(&id).expect("pool ids come from the table")] = s;
                    }
                }
                Some(params) => {
                    let selected = WsiBag::new(bag.label, bag.patches.restrict(&outcome.state.selected_ids)?)?;
                    let prepared = crate::model::PreparedBag::new(&selected, cfg.sigma)?;
                    let fwd = forward_sample(&prepared, params)?;
                    let received = attention_received(fwd.cache.attention.view());
                    for (id, s) in prepared.nodes.ids.iter().zip(received) {
                        scores[ids.binary_search(id).expect("selected ⊆ table")] = s;
                    }
                }
            }
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;
    for (bag, scores) in bags.iter().zip(&per_slide) {
        heatmap_export(scores, &bag.patches, out.join(&bag.slide_id))?;
    }
    Ok(format!("wrote {} heatmaps", bags.len()))
}

/// K-fold cross-validation: `fold<k>_predictions.csv` per fold and
/// `crossval.csv` with per-fold metrics followed by mean and std rows.
pub fn cmd_crossval(cfg: &Config, input: &Path, out: &Path) -> Result<String> {
    let prepared = prepare_bags(&load_dataset(input)?, cfg)?;
    let report = crossval(&prepared, cfg)?;
    ensure_dir(out)?;
    let mut table = String::from("fold,auc,kappa,accuracy,best_epoch\n");
    for f in &report.folds {
        write(out.join(format!("fold{}_predictions.csv", f.fold)), &format_predictions(&f.predictions))?;
        let m = &f.metrics;
        let _ = writeln!(table, "{},{:?},{:?},{:?},{}", f.fold, m.auc, m.kappa, m.accuracy, f.best_epoch);
    }
    let (auc_mean, auc_std) = mean_std(&report.auc());
    let (kappa_mean, kappa_std) = mean_std(&report.kappa());
    let acc: Vec<f64> = report.folds.iter().map(|f| f.metrics.accuracy).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let _ = writeln!(table, "mean,{auc_mean:?},{kappa_mean:?},{acc_mean:?},");
    let _ = writeln!(table, "std,{auc_std:?},{kappa_std:?},{acc_std:?},");
    write(out.join(CROSSVAL_FILE), &table)?;
    Ok(format!(
        "{} folds: auc {auc_mean:.4} ± {auc_std:.4}, kappa {kappa_mean:.4} ± {kappa_std:.4}",
        report.folds.len()
    ))
}

pub struct Invocation<'a> {
    pub config: &'a Config,
    pub input: Option<&'a Path>,
    pub output_dir: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub source: HeatmapSource,
    pub traces: bool,
}

pub fn dispatch(command: &str, inv: &Invocation<'_>) -> Result<String> {
    let cfg = inv.config;
    let out = inv.output_dir;
    match command {
        "synth" => cmd_synth(cfg, out),
        "select" => cmd_select(cfg, require(inv.input, "--input")?, out, inv.traces),
        "train" => cmd_train(cfg, require(inv.input, "--input")?, out),
        "infer" => cmd_infer(cfg, require(inv.input, "--input")?, require(inv.checkpoint, "--checkpoint")?, out),
        "heatmap" => cmd_heatmap(cfg, require(inv.input, "--input")?, out, inv.source, inv.checkpoint),
        "crossval" => cmd_crossval(cfg, require(inv.input, "--input")?, out),
        other => Err(GlatError::Config(format!("unknown command {other:?}"))),
    }
}
