//! Experiment configuration and built-in presets.
//!
//! A config is one JSON document. Every block is validated before any work
//! starts; errors name the offending field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::diagnostics::BoundConstants;
use crate::error::{Error, Result};
use crate::fedsim::{LrPolicy, Mode, TrainConfig};
use crate::inference::ENTROPY_GRID;
use crate::latency::{log_grid, LatencyParams, RateFormula};
use crate::partition::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub num_shards: usize,
    pub shards_per_client: usize,
    pub model: ModelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdChoice {
    /// Evaluate every value; the best macro accuracy is reported.
    Grid(Vec<f64>),
    Fixed(f64),
}

impl ThresholdChoice {
    pub fn values(&self) -> Vec<f64> {
        match self {
            ThresholdChoice::Grid(v) => v.clone(),
            ThresholdChoice::Fixed(v) => vec![*v],
        }
    }
}

impl Default for ThresholdChoice {
    fn default() -> Self {
        ThresholdChoice::Grid(ENTROPY_GRID.to_vec())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Out-of-distribution ratios; empty skips evaluation.
    #[serde(default)]
    pub rhos: Vec<f64>,
    #[serde(default)]
    pub thresholds: ThresholdChoice,
    /// Replicate seeds; empty means the top-level seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    pub params: LatencyParams,
    /// Client compute rates for the τ-vs-P_C curve.
    #[serde(default)]
    pub client_rates: Vec<f64>,
    /// Uplink rates for the τ-vs-R curve.
    #[serde(default)]
    pub uplink_rates: Vec<f64>,
    #[serde(default)]
    pub formula: RateFormula,
    /// Minimum client-segment size for the feasible split range.
    #[serde(default)]
    pub phi_min: Option<f64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Master seed; every stream is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<SyntheticSpec>,
    #[serde(default)]
    pub partition: Option<PartitionConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Training modes to run; empty skips training.
    #[serde(default)]
    pub modes: Vec<Mode>,
    /// λ values for the split mode; empty means `train.lambda`.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub latency: Option<LatencyConfig>,
    /// Constants for the convergence-bound column of the history.
    #[serde(default)]
    pub bound: Option<BoundConstants>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses the default pool.
    #[serde(default)]
    pub workers: usize,
}

/// The pieces needed to train, present whenever `modes` is non-empty.
pub struct TrainingBlocks<'a> {
    pub dataset: &'a SyntheticSpec,
    pub partition: &'a PartitionConfig,
    pub train: &'a TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replicate seeds in run order.
    pub fn seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.eval.seeds.clone()
        }
    }

    /// λ values a mode is trained with.
    pub fn lambdas_for(&self, mode: Mode) -> Vec<f64> {
        let base = self.train.as_ref().map(|t| t.lambda).unwrap_or(0.0);
        if mode != Mode::Splitgp || self.lambdas.is_empty() {
            vec![base]
        } else {
            self.lambdas.clone()
        }
    }

    pub fn training(&self) -> Result<TrainingBlocks<'_>> {
        let missing = |f: &str| Error::config(f, "required when modes are listed");
        Ok(TrainingBlocks {
            dataset: self.dataset.as_ref().ok_or_else(|| missing("dataset"))?,
            partition: self.partition.as_ref().ok_or_else(|| missing("partition"))?,
            train: self.train.as_ref().ok_or_else(|| missing("train"))?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.modes.is_empty() {
            let b = self.training()?;
            b.dataset.validate()?;
            b.partition.model.validate()?;
            let p = b.partition;
            if p.clients == 0 || p.shards_per_client == 0 {
                return Err(Error::config("partition.clients", "clients and shards per client must be positive"));
            }
            if p.num_shards != p.clients * p.shards_per_client {
                return Err(Error::config(
                    "partition.num_shards",
                    format!("must equal clients x shards_per_client = {}", p.clients * p.shards_per_client),
                ));
            }
            let train_size = b.dataset.num_classes * b.dataset.per_class;
            if train_size % p.num_shards != 0 {
                return Err(Error::config(
                    "partition.num_shards",
                    format!("must divide the training-set size {train_size}"),
                ));
            }
            for mode in &self.modes {
                for lambda in self.lambdas_for(*mode) {
                    let mut t = b.train.clone();
                    t.mode = *mode;
                    t.lambda = lambda;
                    t.validate()?;
                }
            }
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config("lambdas", format!("{l} is outside [0, 1]")));
        }
        if let Some(r) = self.eval.rhos.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::config("eval.rhos", format!("{r} must be finite and non-negative")));
        }
        if self.eval.thresholds.values().is_empty() {
            return Err(Error::config("eval.thresholds", "grid must not be empty"));
        }
        if let Some(l) = &self.latency {
            l.params.validate()?;
            if l.client_rates.iter().chain(&l.uplink_rates).any(|&v| !(v > 0.0)) {
                return Err(Error::config("latency.*_rates", "sweep values must be positive"));
            }
        }
        if let Some(b) = &self.bound {
            b.validate().map_err(|e| Error::config("bound", e.to_string()))?;
        }
        Ok(())
    }

    /// Built-in scenarios: `accuracy`, `lambda`, `eth`, `latency`, `convergence`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = desk_base(name);
        match name {
            "accuracy" => {}
            "lambda" => {
                cfg.modes = vec![Mode::Splitgp];
                cfg.lambdas = vec![0.2, 0.3, 0.5, 0.9];
            }
            "eth" => {
                cfg.modes = vec![Mode::Splitgp];
                cfg.eval.rhos = vec![0.0, 0.4, 0.8, 1.6];
                if let Some(t) = cfg.train.as_mut() {
                    t.lambda = 0.9;
                }
            }
            "latency" => {
                cfg.modes.clear();
                cfg.eval.rhos.clear();
            }
            "convergence" => {
                cfg.modes = vec![Mode::Splitgp];
                cfg.eval.rhos = vec![0.0];
                cfg.eval.seeds = vec![1];
                if let Some(ds) = cfg.dataset.as_mut() {
                    ds.per_class = 40;
                }
                if let Some(p) = cfg.partition.as_mut() {
                    p.model.hidden = vec![16, 16];
                }
                if let Some(t) = cfg.train.as_mut() {
                    t.lambda = 0.2;
                    t.lr = LrPolicy::Schedule { eta0: 156.375, c: 5000.0 };
                    t.rounds = 200;
                    t.batch_size = 20;
                    t.track_grad_norm = true;
                }
                cfg.bound = Some(BoundConstants {
                    smoothness: 1.0,
                    grad_bound: 1.0,
                    sigmas: vec![1.0; 10],
                    c: 5000.0,
                    eta0: 156.375,
                    initial_objective: 10f64.ln(),
                    optimum: 0.0,
                });
            }
            other => return Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Desk-scale stand-in for the image benchmarks: 10 Gaussian blobs in 20
/// dimensions, 10 clients with 2 class-sorted shards each.
fn desk_base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        seed: 1,
        dataset: Some(SyntheticSpec {
            num_classes: 10,
            per_class: 200,
            dim: 20,
            spread: 1.5,
        }),
        partition: Some(PartitionConfig {
            clients: 10,
            num_shards: 20,
            shards_per_client: 2,
            model: ModelSpec {
                hidden: vec![32, 32],
                cut_index: 2,
                head_hidden: vec![],
            },
        }),
        train: Some(TrainConfig {
            gamma: 0.5,
            lambda: 0.5,
            lr: LrPolicy::Fixed { lr: 0.1 },
            rounds: 100,
            batch_size: 50,
            local_steps: None,
            finetune_epochs: 5,
            mode: Mode::Splitgp,
            seed: 1,
            track_grad_norm: false,
        }),
        modes: vec![Mode::Personalized, Mode::Fedavg, Mode::Splitgp],
        lambdas: vec![],
        eval: EvalConfig {
            rhos: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            thresholds: ThresholdChoice::default(),
            seeds: vec![1, 2, 3],
        },
        latency: Some(LatencyConfig {
            params: LatencyParams::fixture(),
            client_rates: log_grid(1.0, 10_000.0, 41),
            uplink_rates: log_grid(0.01, 1_000.0, 51),
            formula: RateFormula::Exact,
            phi_min: None,
        }),
        bound: None,
        output_dir: PathBuf::from(format!("runs/{name}")),
        workers: 0,
    }
}
