//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys take the defaults of [`ExperimentConfig::default`].

use crate::bandit::{RewardFamily, RewardModel};
use crate::model::GenerationConfig;
use crate::sim::RegretMode;
use crate::solver::{ObjectiveWeights, SolverMode, SolverOptions};
use serde_json::{json, Map, Value};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: cannot parse `{key}`: {message}")]
    ParseError { line: usize, key: String, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

pub const KEYS: [&str; 18] = [
    "k",
    "n",
    "c_min",
    "c_max",
    "q_min",
    "q_max",
    "lambda1",
    "lambda2",
    "horizon",
    "runs",
    "seed",
    "reward_family",
    "reward_sigma",
    "regret_mode",
    "solver_mode",
    "node_limit",
    "resample_instance",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Market shape and amount ranges. Its `seed` is unused; instance seeds
    /// derive from [`ExperimentConfig::seed`].
    pub generation: GenerationConfig,
    pub weights: ObjectiveWeights,
    pub solver: SolverOptions,
    pub reward: RewardModel,
    pub horizon: u64,
    pub runs: usize,
    pub seed: u64,
    pub regret_mode: RegretMode,
    /// Draw a fresh instance for every run instead of sharing one.
    pub resample_instance: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            weights: ObjectiveWeights::default(),
            solver: SolverOptions::default(),
            reward: RewardModel::default(),
            horizon: 10_000,
            runs: 50,
            seed: 0,
            regret_mode: RegretMode::default(),
            resample_instance: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::ParseError {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.to_string(), message: message.into() }
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let mut sigma = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::ParseError {
                    line,
                    key: trimmed.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::ParseError { line, key: key.to_string(), message: "duplicate key".into() });
            }
            let g = &mut cfg.generation;
            match key {
                "k" => g.num_borrowers = parse(line, key, value)?,
                "n" => g.num_lenders = parse(line, key, value)?,
                "c_min" => g.capacity_range.0 = parse(line, key, value)?,
                "c_max" => g.capacity_range.1 = parse(line, key, value)?,
                "q_min" => g.budget_range.0 = parse(line, key, value)?,
                "q_max" => g.budget_range.1 = parse(line, key, value)?,
                "lambda1" => cfg.weights.lambda1 = parse(line, key, value)?,
                "lambda2" => cfg.weights.lambda2 = parse(line, key, value)?,
                "horizon" => cfg.horizon = parse(line, key, value)?,
                "runs" => cfg.runs = parse(line, key, value)?,
                "seed" => cfg.seed = parse(line, key, value)?,
                "reward_family" => cfg.reward.family = parse::<RewardFamily>(line, key, value)?,
                "reward_sigma" => sigma = Some(parse::<f64>(line, key, value)?),
                "regret_mode" => cfg.regret_mode = parse(line, key, value)?,
                "solver_mode" => cfg.solver.mode = parse::<SolverMode>(line, key, value)?,
                "node_limit" => cfg.solver.node_limit = parse(line, key, value)?,
                "resample_instance" => cfg.resample_instance = parse(line, key, value)?,
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!("key list checked above"),
            }
        }
        // Deterministic rewards have no spread unless one is asked for, in
        // which case validation rejects it.
        cfg.reward.sigma = match (cfg.reward.family, sigma) {
            (_, Some(s)) => s,
            (RewardFamily::Deterministic, None) => 0.0,
            (RewardFamily::Gaussian, None) => RewardModel::default().sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.generation;
        if g.num_borrowers == 0 {
            return Err(invalid("k", "need at least one borrower"));
        }
        if g.num_lenders == 0 {
            return Err(invalid("n", "need at least one lender"));
        }
        let (c_min, c_max) = g.capacity_range;
        if !(c_min > 0.0 && c_min <= c_max && c_max.is_finite()) {
            return Err(invalid("c_max", "need 0 < c_min <= c_max"));
        }
        let (q_min, q_max) = g.budget_range;
        if !(q_min > 0.0 && q_min <= q_max && q_max.is_finite()) {
            return Err(invalid("q_max", "need 0 < q_min <= q_max"));
        }
        self.weights.validate().map_err(|e| invalid("lambda1", e.to_string()))?;
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(invalid("runs", "must be at least 1"));
        }
        self.reward.validate().map_err(|e| invalid("reward_sigma", e.to_string()))?;
        if self.solver.node_limit == 0 {
            return Err(invalid("node_limit", "must be at least 1"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("out_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Every key with its typed value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let g = &self.generation;
        vec![
            ("k", json!(g.num_borrowers)),
            ("n", json!(g.num_lenders)),
            ("c_min", json!(g.capacity_range.0)),
            ("c_max", json!(g.capacity_range.1)),
            ("q_min", json!(g.budget_range.0)),
            ("q_max", json!(g.budget_range.1)),
            ("lambda1", json!(self.weights.lambda1)),
            ("lambda2", json!(self.weights.lambda2)),
            ("horizon", json!(self.horizon)),
            ("runs", json!(self.runs)),
            ("seed", json!(self.seed)),
            ("reward_family", json!(self.reward.family.to_string())),
            ("reward_sigma", json!(self.reward.sigma)),
            ("regret_mode", json!(self.regret_mode.to_string())),
            ("solver_mode", json!(self.solver.mode.to_string())),
            ("node_limit", json!(self.solver.node_limit)),
            ("resample_instance", json!(self.resample_instance)),
            ("out_dir", json!(self.out_dir.to_string_lossy())),
        ]
    }

    /// Text form accepted by [`ExperimentConfig::parse_str`]. Reals are
    /// written in shortest round-trip form, so loading it back is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let rendered = match value {
                Value::String(s) => s,
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key} = {rendered}");
        }
        out
    }

    /// The configuration as recorded in summaries. The output directory is
    /// left out: it says where results went, not how they were produced.
    pub fn echo(&self) -> Map<String, Value> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| *k != "out_dir")
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    ExperimentConfig::parse_str(&text)
}
