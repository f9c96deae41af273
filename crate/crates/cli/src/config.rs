//! Experiment configuration: a flat `key = value` text format with
//! `include = <preset or path>` lines. Later assignments override earlier
//! ones; `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use factorformer::net::{FactorInit, Hyperparams};
use factorformer::train::TrainConfig;
use factorformer::{Error, Result};
use sha2::{Digest, Sha256};

const PRESETS: &[(&str, &str)] = &[
    ("process1", "mode = simulate\nprocess = 1\n"),
    ("process2", "mode = simulate\nprocess = 2\n"),
    ("process3", "mode = simulate\nprocess = 3\n"),
    ("process4", "mode = simulate\nprocess = 4\n"),
    ("process5", "mode = simulate\nprocess = 5\n"),
    ("process6", "mode = simulate\nprocess = 6\n"),
    ("lambda0", "lambda = 0\n"),
    ("lambda06", "lambda = 0.6\n"),
    ("lambda1", "lambda = 1\n"),
    ("ablation", "lambda = 0, 0.6, 1\n"),
    ("empirical", "mode = empirical\nlambda = 0.2\ndropout = 0.1\nweight_decay = 0.01\nruns = 20\ntentacle_steps = 12\n"),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Resolved key/value assignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse_str(text: &str, origin: &Path, depth: usize) -> Result<Self> {
        let mut cfg = RawConfig::default();
        cfg.merge_text(text, origin, depth)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text, path, 0)
    }

    fn merge_text(&mut self, text: &str, origin: &Path, depth: usize) -> Result<()> {
        if depth > 16 {
            return Err(Error::Config("include nesting too deep (cycle?)".into()));
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                detail: format!("line {}: expected `key = value`", n + 1),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                self.include(v, origin, depth)?;
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    /// Includes a preset by name, or a file relative to the including file.
    pub fn include(&mut self, target: &str, origin: &Path, depth: usize) -> Result<()> {
        if let Some(text) = preset(target) {
            return self.merge_text(text, Path::new(target), depth + 1);
        }
        let base = origin.parent().unwrap_or(Path::new("."));
        let path: PathBuf = base.join(target);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("include `{target}`: not a preset and not readable ({e})")))?;
        self.merge_text(&text, &path, depth + 1)
    }

    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{assignment}` is not a key=value assignment")))?;
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub process: u8,
    /// Series length override for simulations.
    pub n: Option<usize>,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub hyper: Hyperparams,
    pub train: TrainConfig,
    pub n_particles: usize,
    pub track_test_fit: bool,
    pub data: Vec<PathBuf>,
    pub split: Option<PathBuf>,
    pub recessions: Option<PathBuf>,
    pub tentacle_steps: usize,
    pub tentacle_stride: usize,
    pub smooth_alpha: f64,
    pub attention_per_head: bool,
    pub out: PathBuf,
    pub raw: RawConfig,
}

const KEYS: &[&str] = &[
    "mode", "process", "n", "seeds", "lambda", "runs", "p", "d_model", "n_head", "d_k", "d_ff", "n_layers", "dropout",
    "enc_scale", "sinusoidal", "factor_init", "batch", "lr", "t0", "warmup", "max_epochs", "weight_decay", "patience",
    "train_seed", "n_particles", "track_test_fit", "data", "split", "recessions", "tentacle_steps", "tentacle_stride",
    "smooth_alpha", "attention_per_head", "out",
];

fn get<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T> {
    match raw.values.get(key) {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        None => Ok(default),
    }
}

fn list<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Option<Vec<T>>> {
    raw.values
        .get(key)
        .map(|v| {
            v.split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))))
                .collect()
        })
        .transpose()
}

impl ExperimentConfig {
    /// Typed view of the assignments, validated. Relative paths resolve
    /// against `base`.
    pub fn from_raw(raw: RawConfig, base: &Path) -> Result<Self> {
        for k in raw.values.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        let mode = match raw.values.get("mode").map(String::as_str).unwrap_or("simulate") {
            "simulate" => Mode::Simulate,
            "empirical" => Mode::Empirical,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        };
        let process: u8 = get(&raw, "process", 1)?;
        if !(1..=6).contains(&process) {
            return Err(Error::Config(format!("process must be 1..6, got {process}")));
        }
        let seeds: Vec<u64> = list(&raw, "seeds")?.unwrap_or_else(|| vec![1]);
        let lambdas: Vec<f64> = list(&raw, "lambda")?.unwrap_or_else(|| vec![0.6]);
        if seeds.is_empty() || lambdas.is_empty() {
            return Err(Error::Config("seeds and lambda need at least one value".into()));
        }
        let path = |key: &str| raw.values.get(key).map(|v| base.join(v));
        let data: Vec<PathBuf> = list::<String>(&raw, "data")?.unwrap_or_default().iter().map(|p| base.join(p)).collect();

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            batch: get(&raw, "batch", defaults.batch)?,
            lr: get(&raw, "lr", defaults.lr)?,
            t0: get(&raw, "t0", defaults.t0)?,
            warmup: get(&raw, "warmup", defaults.warmup)?,
            max_epochs: get(&raw, "max_epochs", defaults.max_epochs)?,
            weight_decay: get(&raw, "weight_decay", defaults.weight_decay)?,
            lambda: lambdas[0],
            runs: get(&raw, "runs", defaults.runs)?,
            patience: get(&raw, "patience", defaults.patience)?,
            seed: get(&raw, "train_seed", 0)?,
            ..defaults
        };
        for &l in &lambdas {
            TrainConfig { lambda: l, ..train.clone() }.validate()?;
        }
        // k is filled in once the data width is known
        let h0 = Hyperparams::new(1);
        let factor_init = match raw.values.get("factor_init").map(String::as_str).unwrap_or("mean") {
            "mean" => FactorInit::Mean,
            v => match v.strip_prefix("variable") {
                Some(i) => FactorInit::Variable(
                    i.trim()
                        .parse::<usize>()
                        .ok()
                        .and_then(|i| i.checked_sub(1))
                        .ok_or_else(|| Error::Config(format!("factor_init: bad variable in `{v}` (use variableN, N >= 1)")))?,
                ),
                None => return Err(Error::Config(format!("factor_init must be `mean` or `variableN`, got `{v}`"))),
            },
        };
        let hyper = Hyperparams {
            p: get(&raw, "p", h0.p)?,
            k: 1,
            d_model: get(&raw, "d_model", h0.d_model)?,
            n_head: get(&raw, "n_head", h0.n_head)?,
            d_k: get(&raw, "d_k", h0.d_k)?,
            d_ff: get(&raw, "d_ff", h0.d_ff)?,
            n_layers: get(&raw, "n_layers", h0.n_layers)?,
            dropout: get(&raw, "dropout", h0.dropout)?,
            enc_scale: get(&raw, "enc_scale", h0.enc_scale)?,
            sinusoidal: get(&raw, "sinusoidal", false)?,
            factor_init: FactorInit::Mean,
        };
        hyper.validate()?;
        let hyper = Hyperparams { factor_init, ..hyper };
        let cfg = Self {
            mode,
            process,
            n: raw.values.get("n").map(|v| v.parse()).transpose().map_err(|_| Error::Config("`n`: not an integer".into()))?,
            seeds,
            lambdas,
            hyper,
            train,
            n_particles: get(&raw, "n_particles", 10_000)?,
            track_test_fit: get(&raw, "track_test_fit", false)?,
            data,
            split: path("split"),
            recessions: path("recessions"),
            tentacle_steps: get(&raw, "tentacle_steps", 20)?,
            tentacle_stride: get(&raw, "tentacle_stride", 10)?,
            smooth_alpha: get(&raw, "smooth_alpha", 0.1)?,
            attention_per_head: get(&raw, "attention_per_head", false)?,
            out: path("out").unwrap_or_else(|| PathBuf::from("out")),
            raw,
        };
        if cfg.n_particles == 0 || cfg.tentacle_stride == 0 {
            return Err(Error::Config("n_particles and tentacle_stride must be positive".into()));
        }
        if !(cfg.smooth_alpha > 0.0 && cfg.smooth_alpha <= 1.0) {
            return Err(Error::Config("smooth_alpha must lie in (0, 1]".into()));
        }
        if cfg.mode == Mode::Empirical && (cfg.data.is_empty() || cfg.split.is_none()) {
            return Err(Error::Config("empirical mode needs `data` (CSV list) and `split`".into()));
        }
        Ok(cfg)
    }

    /// Hyperparameters for data with `k` observables.
    pub fn hyper_for(&self, k: usize) -> Result<Hyperparams> {
        let h = Hyperparams { k, ..self.hyper.clone() };
        h.validate()?;
        Ok(h)
    }

    pub fn train_for(&self, lambda: f64) -> TrainConfig {
        TrainConfig { lambda, ..self.train.clone() }
    }
}
