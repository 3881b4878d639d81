//! `key = value` experiment configuration.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use cryptoseq::cells::{Family, NetworkSpec};
use cryptoseq::dataset::SplitSpec;
use cryptoseq::training::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    LongShort,
    BuySell,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SarimaGrid {
    None,
    Small,
    Default,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_source: DataSource,
    pub data_dir: PathBuf,
    pub target_column: String,
    pub derive_features: bool,
    pub volatility_window: usize,
    pub synth_days: usize,
    pub synth_features: usize,
    pub forced_drops: Vec<String>,
    pub correlation_threshold: f64,
    pub paper_mode_normalization: bool,
    pub split: SplitSpec,
    pub model_family: Family,
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
    pub lookback: usize,
    pub eval_lookbacks: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub sarima: SarimaGrid,
    pub strategy: Strategy,
    pub fee: f64,
    pub emit_buy_and_hold: bool,
}

const KEYS: &[&str] = &[
    "data_source",
    "data_dir",
    "target_column",
    "derive_features",
    "volatility_window",
    "synth_days",
    "synth_features",
    "forced_drops",
    "correlation_threshold",
    "paper_mode_normalization",
    "train_start",
    "train_end",
    "validation_start",
    "validation_end",
    "test_start",
    "test_end",
    "model_family",
    "layer_sizes",
    "dropout_rate",
    "recurrent_dropout_rate",
    "lookback",
    "eval_lookbacks",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "clip_norm",
    "seed",
    "sarima",
    "strategy",
    "fee",
    "emit_buy_and_hold",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let family = Family::GRU1RecurrentDropout;
        let (dropout, recurrent) = family.default_rates();
        let train = TrainConfig::for_family(family);
        Self {
            data_source: DataSource::Synthetic,
            data_dir: PathBuf::from("data"),
            target_column: "price".into(),
            derive_features: false,
            volatility_window: 30,
            synth_days: 2000,
            synth_features: 4,
            forced_drops: Vec::new(),
            correlation_threshold: 0.8,
            paper_mode_normalization: false,
            split: SplitSpec::default(),
            model_family: family,
            layer_sizes: family.default_layer_sizes(),
            dropout_rate: dropout,
            recurrent_dropout_rate: recurrent,
            lookback: 30,
            eval_lookbacks: vec![15, 30, 45, 60],
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            clip_norm: train.clip_norm,
            seed: 0,
            sarima: SarimaGrid::Default,
            strategy: Strategy::LongShort,
            fee: 0.008,
            emit_buy_and_hold: false,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_num<N: FromStr>(v: &str) -> std::result::Result<N, String>
where
    N::Err: fmt::Display,
{
    v.parse::<N>().map_err(|e| e.to_string())
}

fn parse_list<N: FromStr>(v: &str) -> std::result::Result<Vec<N>, String>
where
    N::Err: fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_names(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn parse_date(v: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(v, "%Y-%m-%d").map_err(|e| e.to_string())
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn assign(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "data_source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv,
                    _ => return Err("expected synthetic or csv".into()),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "target_column" => {
                if v.is_empty() {
                    return Err("empty column name".into());
                }
                self.target_column = v.into()
            }
            "derive_features" => self.derive_features = parse_bool(v)?,
            "volatility_window" => self.volatility_window = parse_num(v)?,
            "synth_days" => self.synth_days = parse_num(v)?,
            "synth_features" => self.synth_features = parse_num(v)?,
            "forced_drops" => self.forced_drops = parse_names(v),
            "correlation_threshold" => self.correlation_threshold = parse_num(v)?,
            "paper_mode_normalization" => self.paper_mode_normalization = parse_bool(v)?,
            "train_start" => self.split.train.0 = parse_date(v)?,
            "train_end" => self.split.train.1 = parse_date(v)?,
            "validation_start" => self.split.validation.0 = parse_date(v)?,
            "validation_end" => self.split.validation.1 = parse_date(v)?,
            "test_start" => self.split.test.0 = parse_date(v)?,
            "test_end" => self.split.test.1 = parse_date(v)?,
            "model_family" => self.model_family = v.parse().map_err(|e: cryptoseq::Error| e.to_string())?,
            "layer_sizes" => self.layer_sizes = parse_list(v)?,
            "dropout_rate" => self.dropout_rate = parse_num(v)?,
            "recurrent_dropout_rate" => self.recurrent_dropout_rate = parse_num(v)?,
            "lookback" => self.lookback = parse_num(v)?,
            "eval_lookbacks" => self.eval_lookbacks = parse_list(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "learning_rate" => self.learning_rate = parse_num(v)?,
            "beta1" => self.beta1 = parse_num(v)?,
            "beta2" => self.beta2 = parse_num(v)?,
            "epsilon" => self.epsilon = parse_num(v)?,
            "clip_norm" => self.clip_norm = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "sarima" => {
                self.sarima = match v {
                    "none" => SarimaGrid::None,
                    "small" => SarimaGrid::Small,
                    "default" => SarimaGrid::Default,
                    _ => return Err("expected none, small or default".into()),
                }
            }
            "strategy" => {
                self.strategy = match v {
                    "long_short" => Strategy::LongShort,
                    "buy_sell" => Strategy::BuySell,
                    "none" => Strategy::None,
                    _ => return Err("expected long_short, buy_sell or none".into()),
                }
            }
            "fee" => self.fee = parse_num(v)?,
            "emit_buy_and_hold" => self.emit_buy_and_hold = parse_bool(v)?,
            _ => unreachable!("key list and assign disagree on {key}"),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "data_source" => match self.data_source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Csv => "csv".into(),
            },
            "data_dir" => self.data_dir.display().to_string(),
            "target_column" => self.target_column.clone(),
            "derive_features" => self.derive_features.to_string(),
            "volatility_window" => self.volatility_window.to_string(),
            "synth_days" => self.synth_days.to_string(),
            "synth_features" => self.synth_features.to_string(),
            "forced_drops" => self.forced_drops.join(","),
            "correlation_threshold" => self.correlation_threshold.to_string(),
            "paper_mode_normalization" => self.paper_mode_normalization.to_string(),
            "train_start" => self.split.train.0.to_string(),
            "train_end" => self.split.train.1.to_string(),
            "validation_start" => self.split.validation.0.to_string(),
            "validation_end" => self.split.validation.1.to_string(),
            "test_start" => self.split.test.0.to_string(),
            "test_end" => self.split.test.1.to_string(),
            "model_family" => self.model_family.to_string(),
            "layer_sizes" => join(&self.layer_sizes),
            "dropout_rate" => self.dropout_rate.to_string(),
            "recurrent_dropout_rate" => self.recurrent_dropout_rate.to_string(),
            "lookback" => self.lookback.to_string(),
            "eval_lookbacks" => join(&self.eval_lookbacks),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "seed" => self.seed.to_string(),
            "sarima" => match self.sarima {
                SarimaGrid::None => "none".into(),
                SarimaGrid::Small => "small".into(),
                SarimaGrid::Default => "default".into(),
            },
            "strategy" => self.strategy.name().into(),
            "fee" => self.fee.to_string(),
            "emit_buy_and_hold" => self.emit_buy_and_hold.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key in fixed order, one `key = value` line each. Parsing this text
    /// reproduces the same configuration.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// First 12 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn network_spec(&self, lookback: usize, input_width: usize) -> cryptoseq::Result<NetworkSpec> {
        NetworkSpec::new(self.model_family, lookback, input_width)?
            .with_layer_sizes(self.layer_sizes.clone())?
            .with_dropout(self.dropout_rate, self.recurrent_dropout_rate)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
            seed: self.seed,
            force_masks: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if self.lookback == 0 {
            return invalid("lookback must be positive".into());
        }
        if self.eval_lookbacks.is_empty() || self.eval_lookbacks.contains(&0) {
            return invalid("eval_lookbacks must list positive values".into());
        }
        if !(self.correlation_threshold > 0.0 && self.correlation_threshold <= 1.0) {
            return invalid(format!("correlation_threshold {} outside (0,1]", self.correlation_threshold));
        }
        if !(0.0..1.0).contains(&self.fee) {
            return invalid(format!("fee {} outside [0,1)", self.fee));
        }
        if self.volatility_window < 2 {
            return invalid("volatility_window must be at least 2".into());
        }
        if self.data_source == DataSource::Synthetic && self.synth_days < 100 {
            return invalid("synth_days must be at least 100".into());
        }
        if self.forced_drops.contains(&self.target_column) {
            return invalid(format!("target column '{}' is in forced_drops", self.target_column));
        }
        self.split.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        self.train_config().validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        self.network_spec(self.lookback, 1)
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(())
    }
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::LongShort => "long_short",
            Strategy::BuySell => "buy_sell",
            Strategy::None => "none",
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Omitted keys take their
/// defaults, and the batch size, layer sizes and dropout rates default to the
/// chosen model family's values.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: HashSet<&'static str> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(CliError::Syntax { line })?;
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| CliError::UnknownKey {
            key: key.into(),
            line,
        })?;
        if !seen.insert(known) {
            return Err(CliError::DuplicateKey { key: key.into(), line });
        }
        cfg.assign(key, value).map_err(|reason| CliError::Parse {
            key: key.into(),
            value: value.into(),
            line,
            reason,
        })?;
    }
    let family = cfg.model_family;
    let (dropout, recurrent) = family.default_rates();
    if !seen.contains("batch_size") {
        cfg.batch_size = family.default_batch_size();
    }
    if !seen.contains("layer_sizes") {
        cfg.layer_sizes = family.default_layer_sizes();
    }
    if !seen.contains("dropout_rate") {
        cfg.dropout_rate = dropout;
    }
    if !seen.contains("recurrent_dropout_rate") {
        cfg.recurrent_dropout_rate = recurrent;
    }
    cfg.validate()?;
    Ok(cfg)
}
