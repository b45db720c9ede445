//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::DEFAULT_EVAL_POINTS;
use crate::network::NetworkConfig;
use crate::optimizer::{TrainingSchedule, TrainingSetup, DEFAULT_LEARNING_RATE};
use crate::problems::{registry_get, Problem, ProblemDefinition, ProblemError, ProblemKind};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DNM_OUTPUT_ROOT";

pub const KEYS: [&str; 13] = [
    "problem",
    "p",
    "beta",
    "width",
    "blocks",
    "epochs",
    "n_interior",
    "n_boundary",
    "eval_every",
    "seed",
    "learning_rate",
    "output_dir",
    "eval_points",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: String,
    pub p: Option<f64>,
    pub beta: f64,
    pub width: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub output_dir: PathBuf,
    pub eval_points: usize,
}

/// Everything a run needs once the configuration has been checked.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub problem: ProblemDefinition,
    pub setup: TrainingSetup,
}

impl RunConfig {
    /// A configuration with the experiment defaults for the problem's
    /// dimension: `m=10` in 2D, `m=50` in 20D, `m=100` in 100D; `l=5`; 50000
    /// epochs; 64 interior points in 2D and 512 otherwise; 64 per patch.
    pub fn with_defaults(problem: &str, p: Option<f64>, beta: f64) -> Result<Self, ConfigError> {
        let def = registry_get(problem, p)?;
        let d = def.geometry().dim();
        let width = match d {
            2 => 10,
            20 => 50,
            _ => 100,
        };
        Ok(Self {
            problem: problem.to_string(),
            p,
            beta,
            width,
            blocks: 5,
            epochs: 50_000,
            n_interior: if d == 2 { 64 } else { 512 },
            n_boundary: 64,
            eval_every: 100,
            seed: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            output_dir: PathBuf::from(default_dir_name(problem, p, beta)),
            eval_points: DEFAULT_EVAL_POINTS,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if pairs.iter().any(|(_, k, _)| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            pairs.push((line, key.to_string(), value.to_string()));
        }
        let lookup = |key: &str| pairs.iter().find(|(_, k, _)| k == key);
        let problem = lookup("problem")
            .ok_or(ConfigError::Missing("problem"))?
            .2
            .clone();
        let p = lookup("p").map(|(l, k, v)| parse_value(*l, k, v)).transpose()?;
        let beta = lookup("beta")
            .map(|(l, k, v)| parse_value(*l, k, v))
            .transpose()?
            .ok_or(ConfigError::Missing("beta"))?;
        let mut config = Self::with_defaults(&problem, p, beta)?;
        for (line, key, value) in &pairs {
            let (line, key) = (*line, key.as_str());
            match key {
                "problem" | "p" | "beta" => {}
                "width" => config.width = parse_value(line, key, value)?,
                "blocks" => config.blocks = parse_value(line, key, value)?,
                "epochs" => config.epochs = parse_value(line, key, value)?,
                "n_interior" => config.n_interior = parse_value(line, key, value)?,
                "n_boundary" => config.n_boundary = parse_value(line, key, value)?,
                "eval_every" => config.eval_every = parse_value(line, key, value)?,
                "seed" => config.seed = parse_value(line, key, value)?,
                "learning_rate" => config.learning_rate = parse_value(line, key, value)?,
                "output_dir" => config.output_dir = PathBuf::from(value),
                "eval_points" => config.eval_points = parse_value(line, key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        config.resolve()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    /// Every key on its own line; [`RunConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("problem", self.problem.clone());
        if let Some(p) = self.p {
            put("p", p.to_string());
        }
        put("beta", self.beta.to_string());
        put("width", self.width.to_string());
        put("blocks", self.blocks.to_string());
        put("epochs", self.epochs.to_string());
        put("n_interior", self.n_interior.to_string());
        put("n_boundary", self.n_boundary.to_string());
        put("eval_every", self.eval_every.to_string());
        put("seed", self.seed.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("output_dir", self.output_dir.display().to_string());
        put("eval_points", self.eval_points.to_string());
        s
    }

    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        if self.p.is_some() && !ProblemKind::needs_p(&self.problem) {
            return Err(ConfigError::Invalid(format!(
                "problem {} takes no p",
                self.problem
            )));
        }
        let problem = registry_get(&self.problem, self.p)?;
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let network = NetworkConfig::new(problem.geometry().dim(), self.width, self.blocks)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let schedule = TrainingSchedule {
            epochs: self.epochs,
            n_interior: self.n_interior,
            n_boundary: self.n_boundary,
            eval_every: self.eval_every,
        };
        schedule
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval_points == 0 {
            return Err(ConfigError::Invalid("eval_points must be positive".into()));
        }
        Ok(ResolvedRun {
            problem,
            setup: TrainingSetup {
                network,
                schedule,
                beta: self.beta,
                seed: self.seed,
                learning_rate: self.learning_rate,
                eval_points: self.eval_points,
            },
        })
    }

    /// `output_dir`, placed under `$DNM_OUTPUT_ROOT` when relative and the
    /// variable is set.
    pub fn output_path(&self) -> PathBuf {
        self.output_path_under(std::env::var_os(OUTPUT_ROOT_ENV).as_deref().map(Path::new))
    }

    pub fn output_path_under(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

/// `runs/<problem>[_p<p>]_beta<beta>`.
pub fn default_dir_name(problem: &str, p: Option<f64>, beta: f64) -> String {
    format!("runs/{}", super::presets::preset_name(problem, p, beta))
}
