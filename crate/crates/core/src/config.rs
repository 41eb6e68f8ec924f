//! `key = value` experiment configuration.
//!
//! Blank lines and `#` comments (whole-line or trailing) are ignored. Unknown
//! or repeated keys are errors; absent keys keep their defaults.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{AttentionKind, GraphBias};
use crate::error::{GlatError, Result};
use crate::graph::Sigma;
use crate::irm::ScoreMode;
use crate::metrics::KappaWeighting;
use crate::model::{Aggregation, ModelConfig};
use crate::provider::ProviderKind;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// How each slide's `M` patches are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    #[default]
    Irm,
    /// `M` patches uniformly at random, seeded per slide.
    Random,
}

impl FromStr for Selection {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irm" => Ok(Self::Irm),
            "random" => Ok(Self::Random),
            other => Err(GlatError::Config(format!("unknown selection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub provider: ProviderKind,
    pub provider_seed: u64,
    /// Output dimension of the random-projection provider; `None` keeps `d`.
    pub provider_dim: Option<usize>,

    pub selection: Selection,
    pub m: usize,
    pub t: usize,
    pub score_mode: ScoreMode,
    pub irm_seed: u64,
    pub irm_d_k: usize,
    pub irm_d_v: usize,

    pub sigma: Sigma,
    pub filter_order: usize,
    pub lambda: f64,
    pub graph_bias: GraphBias,
    pub attention: AttentionKind,
    pub aggregation: Aggregation,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,

    pub alpha: f64,
    pub patience: usize,
    pub kappa_weighting: KappaWeighting,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub fd_check: bool,
    pub seed: u64,
    pub val_fraction: f64,
    pub folds: usize,

    pub synth: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        Self {
            provider: ProviderKind::Passthrough,
            provider_seed: 0,
            provider_dim: None,
            selection: Selection::Irm,
            m: 32,
            t: 4,
            score_mode: ScoreMode::Received,
            irm_seed: 0,
            irm_d_k: 16,
            irm_d_v: 16,
            sigma: Sigma::Median,
            filter_order: model.filter_order,
            lambda: model.lambda,
            graph_bias: model.graph_bias,
            attention: model.attention,
            aggregation: model.aggregation,
            heads: 1,
            d_k: model.d_k,
            d_v: model.d_v,
            alpha: train.alpha,
            patience: train.patience,
            kappa_weighting: train.kappa_weighting,
            lr: train.lr,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            fd_check: train.fd_check,
            seed: 0,
            val_fraction: 0.2,
            folds: 5,
            synth: SynthSpec::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| GlatError::Config(format!("invalid value {raw:?} for {key}")))
}

fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(GlatError::Config(format!("invalid value {raw:?} for {key}: expected true or false"))),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| GlatError::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(GlatError::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            cfg.set(key, raw)
                .map_err(|e| GlatError::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GlatError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "provider" => self.provider = raw.parse()?,
            "provider_seed" => self.provider_seed = value(key, raw)?,
            "provider_dim" => self.provider_dim = Some(value(key, raw)?),
            "selection" => self.selection = raw.parse()?,
            "m" => self.m = value(key, raw)?,
            "t" => self.t = value(key, raw)?,
            "score_mode" => self.score_mode = raw.parse()?,
            "irm_seed" => self.irm_seed = value(key, raw)?,
            "irm_d_k" => self.irm_d_k = value(key, raw)?,
            "irm_d_v" => self.irm_d_v = value(key, raw)?,
            "sigma" => self.sigma = raw.parse()?,
            "filter_order" => self.filter_order = value(key, raw)?,
            "lambda" => self.lambda = value(key, raw)?,
            "graph_bias" => self.graph_bias = raw.parse()?,
            "attention" => self.attention = raw.parse()?,
            "aggregation" => self.aggregation = raw.parse()?,
            "heads" => self.heads = value(key, raw)?,
            "d_k" => self.d_k = value(key, raw)?,
            "d_v" => self.d_v = value(key, raw)?,
            "alpha" => self.alpha = value(key, raw)?,
            "patience" => self.patience = value(key, raw)?,
            "kappa_weighting" => self.kappa_weighting = raw.parse()?,
            "lr" => self.lr = value(key, raw)?,
            "weight_decay" => self.weight_decay = value(key, raw)?,
            "batch_size" => self.batch_size = value(key, raw)?,
            "max_epochs" => self.max_epochs = value(key, raw)?,
            "fd_check" => self.fd_check = boolean(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "val_fraction" => self.val_fraction = value(key, raw)?,
            "folds" => self.folds = value(key, raw)?,
            "synth_grid_w" => self.synth.grid_w = value(key, raw)?,
            "synth_grid_h" => self.synth.grid_h = value(key, raw)?,
            "synth_d" => self.synth.d = value(key, raw)?,
            "synth_n_slides" => self.synth.n_slides = value(key, raw)?,
            "synth_lesion_count_min" => self.synth.lesion_count_range.0 = value(key, raw)?,
            "synth_lesion_count_max" => self.synth.lesion_count_range.1 = value(key, raw)?,
            "synth_lesion_radius_min" => self.synth.lesion_radius_range.0 = value(key, raw)?,
            "synth_lesion_radius_max" => self.synth.lesion_radius_range.1 = value(key, raw)?,
            "synth_signal_scale" => self.synth.class_signal_scale = value(key, raw)?,
            "synth_noise_scale" => self.synth.noise_scale = value(key, raw)?,
            "synth_seed" => self.synth.seed = value(key, raw)?,
            _ => return Err(GlatError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads != 1 {
            return Err(GlatError::Config(format!("heads = {} is unsupported; only a single head is implemented", self.heads)));
        }
        if self.m == 0 || self.t == 0 {
            return Err(GlatError::Config("m and t must be >= 1".into()));
        }
        if self.d_k == 0 || self.d_v == 0 || self.irm_d_k == 0 || self.irm_d_v == 0 {
            return Err(GlatError::Config("projection dimensions must be >= 1".into()));
        }
        if self.filter_order > crate::graph::MAX_FILTER_ORDER {
            return Err(GlatError::Config(format!("filter_order must be <= {}", crate::graph::MAX_FILTER_ORDER)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(GlatError::Config("lambda must be >= 0".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(GlatError::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(GlatError::Config("folds must be >= 2".into()));
        }
        if self.provider_dim == Some(0) {
            return Err(GlatError::Config("provider_dim must be >= 1".into()));
        }
        self.train_config().validate()
    }

    /// Model shape for embeddings of dimension `d`.
    pub fn model_config(&self, d: usize) -> ModelConfig {
        ModelConfig {
            d,
            d_k: self.d_k,
            d_v: self.d_v,
            m_max: self.m,
            filter_order: self.filter_order,
            lambda: self.lambda,
            graph_bias: self.graph_bias,
            attention: self.attention,
            aggregation: self.aggregation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            alpha: self.alpha,
            seed: self.seed,
            fd_check: self.fd_check,
            kappa_weighting: self.kappa_weighting,
        }
    }
}

fn strip_prefix(e: &GlatError) -> String {
    match e {
        GlatError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
