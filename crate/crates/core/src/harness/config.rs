//! Experiment configuration (JSON). Omitted fields take the reference
//! defaults: S = 50, eta = 0.01, m = 10, N = 100, gamma = 0.3, a = 0.3,
//! B = 2, E = 2 (or uniform in 1..=5 with heterogeneous local updates),
//! R = 500, two labels per client, evaluation every 5 rounds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{ModelKind, ModelSpec};
use crate::quantizer::{QuantizerConfig, MAX_BITS};
use crate::wireless::LinkBudget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    Scaffold,
    FedQvr,
    #[serde(rename = "fedqvr-e")]
    FedQvrE,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedQvr => "fedqvr",
            Algorithm::FedQvrE => "fedqvr-e",
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, Algorithm::FedQvr | Algorithm::FedQvrE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        num_classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: 10,
            dim: 20,
            train_per_class: 200,
            test_per_class: 100,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    /// Each client holds shards of at most `labels_per_client` labels.
    #[default]
    Shards,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WirelessConfig {
    pub link: LinkBudget,
    /// Per-round delay budget in seconds (same for every device).
    pub tau_s: f64,
    pub r_min_m: f64,
    pub r_max_m: f64,
    /// Fairness coefficient of the allocator.
    pub alpha: f64,
    pub b_lower: u32,
    /// Cap applied to allocated bits.
    pub b_max: u32,
    /// Replay channel gains from this JSON-lines trace.
    pub trace_in: Option<PathBuf>,
    /// Record the channel gains used to this JSON-lines trace.
    pub trace_out: Option<PathBuf>,
}

impl Default for WirelessConfig {
    fn default() -> Self {
        WirelessConfig {
            link: LinkBudget::default(),
            tau_s: 1.0,
            r_min_m: 10.0,
            r_max_m: 500.0,
            alpha: 0.5,
            b_lower: 1,
            b_max: 16,
            trace_in: None,
            trace_out: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub metrics_csv: Option<PathBuf>,
    pub round_trace: Option<PathBuf>,
    /// Append a `wall_seconds` column (breaks byte-identical reruns).
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub dataset: DatasetConfig,
    pub model: ModelKind,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// SCAFFOLD local step; falls back to `eta`.
    pub eta_l: Option<f64>,
    pub eta_g: f64,
    pub gamma: Option<f64>,
    pub a: Option<f64>,
    pub bits: u32,
    pub local_steps: usize,
    /// Heterogeneous local updates: `E` uniform in `hlu_range` per client.
    pub hlu: bool,
    pub hlu_range: [usize; 2],
    pub partition: PartitionKind,
    pub labels_per_client: usize,
    pub quantizer: QuantizerConfig,
    pub wireless: Option<WirelessConfig>,
    pub seed: u64,
    pub eval_every: usize,
    /// Run each round's clients on the thread pool.
    pub parallel: bool,
    pub outputs: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::FedQvr,
            dataset: DatasetConfig::default(),
            model: ModelKind::Logistic,
            num_clients: 100,
            clients_per_round: 10,
            rounds: 500,
            batch_size: 50,
            eta: 0.01,
            eta_l: None,
            eta_g: 1.0,
            gamma: Some(0.3),
            a: Some(0.3),
            bits: 2,
            local_steps: 2,
            hlu: false,
            hlu_range: [1, 5],
            partition: PartitionKind::Shards,
            labels_per_client: 2,
            quantizer: QuantizerConfig::default(),
            wireless: None,
            seed: 0,
            eval_every: 5,
            parallel: true,
            outputs: OutputConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be a positive finite number, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            input_dim,
            num_classes,
        }
    }

    pub fn eta_local(&self) -> f64 {
        self.eta_l.unwrap_or(self.eta)
    }

    /// Checks every field the selected algorithm uses; the error names the
    /// first offending field.
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::config("clients_per_round", "must lie in [1, num_clients]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        positive("eta", self.eta)?;
        if self.hlu {
            let [lo, hi] = self.hlu_range;
            if lo == 0 || lo > hi {
                return Err(Error::config("hlu_range", "need 1 <= lo <= hi"));
            }
        } else if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be >= 1"));
        }
        if self.partition == PartitionKind::Shards && self.labels_per_client == 0 {
            return Err(Error::config("labels_per_client", "must be >= 1"));
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = self.model {
            return Err(Error::config("model.hidden_dim", "must be >= 1"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
            } => {
                if *num_classes < 2 {
                    return Err(Error::config("dataset.num_classes", "must be >= 2"));
                }
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be >= 1"));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config(
                        "dataset.train_per_class",
                        "sample counts must be >= 1",
                    ));
                }
                if !(*separation >= 0.0) {
                    return Err(Error::config("dataset.separation", "must be >= 0"));
                }
            }
            DatasetConfig::Mnist { .. } => {}
        }
        match self.algorithm {
            Algorithm::FedQvr | Algorithm::FedQvrE => {
                let gamma = self
                    .gamma
                    .ok_or_else(|| Error::config("gamma", "required by fedqvr"))?;
                positive("gamma", gamma)?;
                let a = self.a.ok_or_else(|| Error::config("a", "required by fedqvr"))?;
                if !(a > 0.0 && a < 1.0) {
                    return Err(Error::config("a", format!("must lie in (0, 1), got {a}")));
                }
                if self.bits == 0 || self.bits > MAX_BITS {
                    return Err(Error::config("bits", format!("must lie in [1, {MAX_BITS}]")));
                }
            }
            Algorithm::Scaffold => {
                positive("eta_l", self.eta_local())?;
                positive("eta_g", self.eta_g)?;
            }
            Algorithm::FedAvg => {}
        }
        if self.algorithm == Algorithm::FedQvrE && self.wireless.is_none() {
            return Err(Error::config("wireless", "required by fedqvr-e"));
        }
        if let Some(w) = &self.wireless {
            w.link.validate()?;
            positive("wireless.tau_s", w.tau_s)?;
            positive("wireless.r_min_m", w.r_min_m)?;
            if !(w.r_max_m >= w.r_min_m) || !w.r_max_m.is_finite() {
                return Err(Error::config("wireless.r_max_m", "must be finite and >= r_min_m"));
            }
            if !(w.alpha >= 0.0) || !w.alpha.is_finite() {
                return Err(Error::config("wireless.alpha", "must be >= 0"));
            }
            if w.b_lower == 0 {
                return Err(Error::config("wireless.b_lower", "must be >= 1"));
            }
            if w.b_max < w.b_lower || w.b_max > MAX_BITS {
                return Err(Error::config(
                    "wireless.b_max",
                    format!("must lie in [b_lower, {MAX_BITS}]"),
                ));
            }
        }
        Ok(())
    }
}

/// Reads and validates a JSON config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Parse {
            line: j.line(),
            reason: j.to_string(),
        },
        other => other,
    })?;
    cfg.validate()?;
    Ok(cfg)
}
