//! Flat `key = value` experiment files. `#` starts a comment; blank lines are ignored.
//!
//! Recognised keys (defaults in parentheses):
//!
//! ```text
//! dataset          blobs | mnist (blobs)
//! classes          blob classes (10)
//! dim              blob feature width (32)
//! per_class        blob samples per class (600)
//! spread           blob standard deviation (1.5)
//! center_seed      seed for blob centers (0)
//! mnist_dir        directory holding the four IDX files (data/mnist)
//! hidden           hidden layer widths, comma separated (64)
//! alpha            Dirichlet concentration (0.1)
//! initial_fraction labelled fraction before the first cycle (0.1)
//! seeds            comma separated run seeds (0)
//! strategies       comma separated acquisition strategies (ksas)
//! out              output directory (out)
//! dump_scores      write per-client score files at each acquisition (false)
//! clients participation rounds cycles budget_fraction lambda nu
//! learning_rate local_epochs batch_size beta_shape scoring_model
//! update_rule target_logits balanced_loss wall_clock
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::blobs::BlobParams;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::sampling::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    Mnist,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "synthetic_blobs" => Ok(DatasetKind::Blobs),
            "mnist" => Ok(DatasetKind::Mnist),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub dataset: DatasetKind,
    pub blobs: BlobParams,
    pub mnist_dir: PathBuf,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub initial_fraction: f64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub out: PathBuf,
    pub dump_scores: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            federation: FederationConfig::default(),
            dataset: DatasetKind::Blobs,
            blobs: BlobParams::default(),
            mnist_dir: PathBuf::from("data/mnist"),
            hidden: vec![64],
            alpha: 0.1,
            initial_fraction: 0.1,
            seeds: vec![0],
            strategies: vec![Strategy::Ksas],
            out: PathBuf::from("out"),
            dump_scores: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Comma-separated strategy names.
pub fn parse_strategies(value: &str) -> Result<Vec<Strategy>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Strategy::from_str)
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = &mut self.federation;
        match key {
            "dataset" => self.dataset = parse(key, value)?,
            "classes" => self.blobs.classes = parse(key, value)?,
            "dim" => self.blobs.dim = parse(key, value)?,
            "per_class" => self.blobs.per_class = parse(key, value)?,
            "spread" => self.blobs.spread = parse(key, value)?,
            "center_seed" => self.blobs.center_seed = parse(key, value)?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(value),
            "hidden" => self.hidden = parse_list(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "initial_fraction" => self.initial_fraction = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "strategies" => self.strategies = parse_strategies(value)?,
            "out" => self.out = PathBuf::from(value),
            "dump_scores" => self.dump_scores = parse_bool(key, value)?,
            "clients" => f.clients = parse(key, value)?,
            "participation" => f.participation = parse(key, value)?,
            "rounds" => f.rounds = parse(key, value)?,
            "cycles" => f.cycles = parse(key, value)?,
            "budget_fraction" => f.budget_fraction = parse(key, value)?,
            "lambda" => f.lambda = parse(key, value)?,
            "nu" => f.nu = parse(key, value)?,
            "learning_rate" => f.learning_rate = parse(key, value)?,
            "local_epochs" => f.local_epochs = parse(key, value)?,
            "batch_size" => f.batch_size = parse(key, value)?,
            "beta_shape" => match parse_list::<f64>(key, value)?.as_slice() {
                [a, b] => f.beta_shape = (*a, *b),
                _ => return Err(Error::Config(format!("`{key}`: expected two numbers"))),
            },
            "scoring_model" => f.scoring_model = value.parse()?,
            "update_rule" => f.update_rule = value.parse()?,
            "target_logits" => f.target_logits = value.parse()?,
            "balanced_loss" => f.balanced_loss = parse_bool(key, value)?,
            "wall_clock" => f.wall_clock = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must not be empty".into()));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return Err(Error::Config(format!(
                "initial fraction must be in (0, 1), got {}",
                self.initial_fraction
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        self.federation.validate()
    }
}
