//! Experiment configuration files (TOML).
//!
//! Omitted fields take the default experiment settings. After parsing every
//! optional field is filled in, so the echo written into a result bundle
//! parses back to an identical config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Caps, StreamKind, MNIST_FILES};
use crate::error::{Error, Result};
use crate::eval::RunSettings;
use crate::methods::{EwcParams, IsyanaParams, Method, MethodParams, OnlineEwcParams, SiParams, TrainConfig};

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "ISYANA_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub stream: StreamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_count: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Hidden layer widths of the classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub masked_eval: bool,
    /// Write per-task φ/Z/η and atlas tables for the modulated methods.
    #[serde(default)]
    pub dump_modulation: bool,
    #[serde(default)]
    pub desk: Caps,
    #[serde(default)]
    pub ewc: EwcParams,
    #[serde(default)]
    pub online_ewc: OnlineEwcParams,
    #[serde(default)]
    pub si: SiParams,
    #[serde(default)]
    pub isyana: IsyanaParams,
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_batch_size() -> usize {
    TrainConfig::default().batch_size
}
fn default_base_lr() -> f64 {
    TrainConfig::default().base_lr
}
fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Default task count and hidden widths of a stream.
pub fn stream_defaults(stream: StreamKind) -> (usize, Vec<usize>) {
    match stream {
        StreamKind::Split => (5, vec![256, 256]),
        StreamKind::Permuted | StreamKind::Rotated => (10, vec![500, 500]),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses and validates `text`. `data_dir_override` (normally the
    /// environment variable) replaces the file's `data_dir`. The data files
    /// are not checked here; see [`ExperimentConfig::check_data`].
    pub fn from_toml_str(text: &str, data_dir_override: Option<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let (tasks, hidden) = stream_defaults(cfg.stream);
        cfg.task_count.get_or_insert(tasks);
        cfg.hidden.get_or_insert(hidden);
        if let Some(dir) = data_dir_override {
            cfg.data_dir = Some(dir);
        }
        cfg.data_dir.get_or_insert_with(|| PathBuf::from("data/mnist"));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn task_count(&self) -> usize {
        self.task_count.unwrap_or_else(|| stream_defaults(self.stream).0)
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| stream_defaults(self.stream).1)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(invalid(format!("method {m} is listed twice")));
            }
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(invalid(format!("seed {s} is listed twice")));
            }
        }
        let tasks = self.task_count();
        match self.stream {
            StreamKind::Split if tasks != 5 => {
                return Err(invalid(format!("the split stream has exactly 5 tasks, not {tasks}")))
            }
            StreamKind::Rotated if tasks < 2 => return Err(invalid("the rotated stream needs at least 2 tasks")),
            _ if tasks == 0 => return Err(invalid("task_count must be positive")),
            _ => {}
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid(format!("base_lr {} must be positive", self.base_lr)));
        }
        let hidden = self.hidden();
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(invalid("hidden widths must be a non-empty list of positive sizes"));
        }
        if self.desk.train_per_task == Some(0) || self.desk.test_per_task == Some(0) {
            return Err(invalid("desk caps must be positive"));
        }
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} = {v} must be a finite non-negative number")))
            }
        };
        non_negative("ewc.lambda", self.ewc.lambda)?;
        non_negative("online_ewc.lambda", self.online_ewc.lambda)?;
        non_negative("online_ewc.gamma", self.online_ewc.gamma)?;
        non_negative("si.strength", self.si.strength)?;
        if self.ewc.fisher_samples == 0 || self.online_ewc.fisher_samples == 0 {
            return Err(invalid("fisher_samples must be positive"));
        }
        if !(self.si.damping > 0.0 && self.si.damping.is_finite()) {
            return Err(invalid(format!("si.damping = {} must be positive", self.si.damping)));
        }
        let p = &self.isyana;
        if !(p.a > 0.0 && p.a.is_finite()) || !p.b.is_finite() || !p.c.is_finite() {
            return Err(invalid("isyana.a must be positive and a, b, c finite"));
        }
        if p.sae_hidden.is_empty() || p.sae_hidden.contains(&0) {
            return Err(invalid("isyana.sae_hidden must be a non-empty list of positive sizes"));
        }
        if !(p.sae_lr > 0.0 && p.sae_lr.is_finite()) {
            return Err(invalid("isyana.sae_lr must be positive"));
        }
        Ok(())
    }

    /// Fails unless all four MNIST files are present in the data directory.
    pub fn check_data(&self) -> Result<()> {
        let dir = self.data_dir();
        let missing: Vec<&str> = MNIST_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(invalid(format!("data directory {} lacks {}", dir.display(), missing.join(", "))))
        }
    }

    pub fn method_params(&self) -> MethodParams {
        MethodParams {
            ewc: self.ewc,
            online_ewc: self.online_ewc,
            si: self.si,
            isyana: self.isyana.clone(),
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            stream: self.stream,
            task_count: self.task_count(),
            hidden: self.hidden(),
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                base_lr: self.base_lr,
            },
            caps: self.desk,
            params: self.method_params(),
            masked_eval: self.masked_eval,
        }
    }
}

/// Reads, parses and validates a config file, applying the data-directory
/// environment override, and checks that the data files exist.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let cfg = ExperimentConfig::from_toml_str(&text, env_dir)?;
    cfg.check_data()?;
    Ok(cfg)
}
