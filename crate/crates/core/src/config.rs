//! Experiment configuration: TOML decoding, defaults, cross-field
//! validation and a content hash.
//!
//! Defaults reproduce the reference protocol: 10 clients, 5 of them
//! malicious, 50 rounds, attacks from round 15, `beta = 0.2`, `f = 5`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::aggregators::{AggregatorKind, AggregatorSpec};
use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{FedError, Result};
use crate::model::{ModelKind, ModelSpec, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub name: Option<String>,
    // synthetic blobs
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    // IDX files; relative paths resolve against the config file
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            name: None,
            train_size: 5000,
            test_size: 1000,
            classes: 10,
            input_dim: 20,
            separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetConfig {
    pub fn label(&self) -> String {
        match (&self.name, self.kind) {
            (Some(n), _) => n.clone(),
            (None, DatasetKind::Synthetic) => "synthetic".into(),
            (None, DatasetKind::Idx) => "idx".into(),
        }
    }

    fn idx_paths(&self) -> Result<[&Path; 4]> {
        fn get<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
            p.as_deref()
                .ok_or_else(|| FedError::config(format!("idx dataset requires dataset.{key}")))
        }
        Ok([
            get(&self.train_images, "train_images")?,
            get(&self.train_labels, "train_labels")?,
            get(&self.test_images, "test_images")?,
            get(&self.test_labels, "test_labels")?,
        ])
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                if self.classes < 2 {
                    return Err(FedError::config("synthetic dataset requires classes >= 2"));
                }
                if self.input_dim == 0 {
                    return Err(FedError::config(
                        "synthetic dataset requires input_dim >= 1",
                    ));
                }
                if self.train_size < self.classes || self.test_size < self.classes {
                    return Err(FedError::config(
                        "synthetic dataset requires train_size and test_size >= classes",
                    ));
                }
                if !self.separation.is_finite() || self.separation < 0.0 {
                    return Err(FedError::config(
                        "synthetic dataset requires separation >= 0",
                    ));
                }
            }
            DatasetKind::Idx => {
                self.idx_paths()?;
                if self.train_limit == Some(0) || self.test_limit == Some(0) {
                    return Err(FedError::config("dataset limits must be >= 1"));
                }
            }
        }
        Ok(())
    }

    fn canonical(&self) -> Value {
        match self.kind {
            DatasetKind::Synthetic => json!({
                "kind": "synthetic",
                "train_size": self.train_size,
                "test_size": self.test_size,
                "classes": self.classes,
                "input_dim": self.input_dim,
                "separation": self.separation,
            }),
            DatasetKind::Idx => json!({
                "kind": "idx",
                "train_images": self.train_images,
                "train_labels": self.train_labels,
                "test_images": self.test_images,
                "test_labels": self.test_labels,
                "train_limit": self.train_limit,
                "test_limit": self.test_limit,
            }),
        }
    }

    pub fn paths(&self) -> Result<[&Path; 4]> {
        self.idx_paths()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Logistic,
            hidden_dim: 16,
            init_scale: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            input_dim,
            num_classes,
            hidden_dim: if self.kind == ModelKind::Mlp {
                self.hidden_dim
            } else {
                0
            },
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn state(&self, dim: usize) -> OptimizerState {
        match self.kind {
            OptimizerKind::Adam => OptimizerState::adam(
                dim,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
            ),
            OptimizerKind::Sgd => OptimizerState::sgd(dim, self.learning_rate, self.momentum),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(FedError::config(
                "optimizer.learning_rate must be finite and >= 0",
            ));
        }
        match self.kind {
            OptimizerKind::Adam => {
                if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
                    return Err(FedError::config("adam requires beta1, beta2 in [0, 1)"));
                }
                if self.epsilon.is_nan() || self.epsilon <= 0.0 {
                    return Err(FedError::config("adam requires epsilon > 0"));
                }
            }
            OptimizerKind::Sgd => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(FedError::config("sgd requires momentum in [0, 1)"));
                }
            }
        }
        Ok(())
    }

    fn canonical(&self) -> Value {
        match self.kind {
            OptimizerKind::Adam => json!({
                "kind": "adam",
                "learning_rate": self.learning_rate,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "epsilon": self.epsilon,
            }),
            OptimizerKind::Sgd => json!({
                "kind": "sgd",
                "learning_rate": self.learning_rate,
                "momentum": self.momentum,
            }),
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_rounds() -> usize {
    50
}
fn default_clients() -> usize {
    10
}
fn default_local_steps() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_true() -> bool {
    true
}

/// Everything needed to run one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Defaults to half the clients. Ignored when `malicious_ids` is set.
    #[serde(default)]
    pub malicious_count: Option<usize>,
    #[serde(default)]
    pub malicious_ids: Option<Vec<usize>>,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Size of the trusted filtering subset; the whole subset when unset.
    #[serde(default)]
    pub filter_size: Option<usize>,
    /// Start every round with fresh optimizer state.
    #[serde(default)]
    pub reset_optimizer: bool,
    /// Train clients on worker threads. Does not affect results.
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub attack: AttackSpec,
    pub aggregator: AggregatorSpec,
}

impl ExperimentConfig {
    /// A synthetic-data config with every other field at its default.
    pub fn synthetic(aggregator: AggregatorKind) -> Self {
        let mut cfg = ExperimentConfig {
            seed: default_seed(),
            rounds: default_rounds(),
            clients: default_clients(),
            malicious_count: None,
            malicious_ids: None,
            local_steps: default_local_steps(),
            batch_size: default_batch_size(),
            filter_size: None,
            reset_optimizer: false,
            parallel: true,
            output: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            attack: AttackSpec::default(),
            aggregator: AggregatorSpec::new(aggregator),
        };
        cfg.resolve();
        cfg
    }

    /// The malicious client ids, ascending.
    pub fn malicious(&self) -> Vec<usize> {
        match &self.malicious_ids {
            Some(ids) => {
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids
            }
            None => {
                let m = self
                    .malicious_count
                    .unwrap_or(self.clients / 2)
                    .min(self.clients);
                (self.clients - m..self.clients).collect()
            }
        }
    }

    /// Fills derived defaults (Multi-Krum's `k`).
    pub fn resolve(&mut self) {
        if self.aggregator.kind == AggregatorKind::MultiKrum && self.aggregator.k.is_none() {
            let honest = self.clients - self.malicious().len();
            let cap = self.clients.saturating_sub(self.aggregator.f + 2);
            self.aggregator.k = Some(honest.min(cap).max(1));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(FedError::config("clients must be >= 1"));
        }
        if self.local_steps == 0 {
            return Err(FedError::config("local_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(FedError::config("batch_size must be >= 1"));
        }
        if self.filter_size == Some(0) {
            return Err(FedError::config("filter_size must be >= 1"));
        }
        if let Some(m) = self.malicious_count {
            if m > self.clients {
                return Err(FedError::config(format!(
                    "malicious_count {m} exceeds clients {}",
                    self.clients
                )));
            }
        }
        if let Some(ids) = &self.malicious_ids {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return Err(FedError::config("malicious_ids contains duplicates"));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.clients) {
                return Err(FedError::config(format!(
                    "malicious id {bad} out of range for {} clients",
                    self.clients
                )));
            }
            if let Some(m) = self.malicious_count {
                if m != ids.len() {
                    return Err(FedError::config(format!(
                        "malicious_count {m} disagrees with {} malicious_ids",
                        ids.len()
                    )));
                }
            }
        }
        self.dataset.validate()?;
        if self.model.kind == ModelKind::Mlp && self.model.hidden_dim == 0 {
            return Err(FedError::config("mlp requires model.hidden_dim >= 1"));
        }
        if !self.model.init_scale.is_finite() || self.model.init_scale < 0.0 {
            return Err(FedError::config("model.init_scale must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.aggregator.validate(self.clients)
    }

    /// Semantic content as JSON: fields that cannot affect results, or
    /// that the chosen kinds ignore, are left out.
    pub fn canonical(&self) -> Value {
        let attack = match self.attack.kind {
            AttackKind::None => json!({ "kind": "none" }),
            AttackKind::LabelFlip => json!({
                "kind": "label_flip",
                "start_round": self.attack.start_round,
            }),
            AttackKind::SignFlip => json!({
                "kind": "sign_flip",
                "start_round": self.attack.start_round,
                "sign_flip_mode": self.attack.sign_flip_mode,
            }),
            AttackKind::GaussianNoise => json!({
                "kind": "gaussian_noise",
                "start_round": self.attack.start_round,
                "mu": self.attack.mu,
                "sigma": self.attack.sigma,
            }),
        };
        let a = &self.aggregator;
        let aggregator = match a.kind {
            AggregatorKind::Mean | AggregatorKind::Median => json!({ "kind": a.kind }),
            AggregatorKind::TrimmedMean => json!({ "kind": a.kind, "beta": a.beta }),
            AggregatorKind::Krum => json!({ "kind": a.kind, "f": a.f }),
            AggregatorKind::MultiKrum => json!({ "kind": a.kind, "f": a.f, "k": a.k }),
            AggregatorKind::LossCluster => json!({
                "kind": a.kind,
                "k_t_override": a.k_t_override,
                "single_pass": a.single_pass,
            }),
        };
        let mut model = json!({ "kind": self.model.kind, "init_scale": self.model.init_scale });
        if self.model.kind == ModelKind::Mlp {
            model["hidden_dim"] = json!(self.model.hidden_dim);
        }
        json!({
            "seed": self.seed,
            "rounds": self.rounds,
            "clients": self.clients,
            "malicious": self.malicious(),
            "local_steps": self.local_steps,
            "batch_size": self.batch_size,
            "filter_size": self.filter_size,
            "reset_optimizer": self.reset_optimizer,
            "dataset": self.dataset.canonical(),
            "model": model,
            "optimizer": self.optimizer.canonical(),
            "attack": attack,
            "aggregator": aggregator,
        })
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Decodes a TOML document, collecting every unrecognised key.
pub(crate) fn decode_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| FedError::config(e.to_string()))?;
    let mut unknown = Vec::new();
    let value: T = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| FedError::config(e.to_string()))?;
    if !unknown.is_empty() {
        return Err(FedError::config(format!(
            "unknown keys: {}",
            unknown.join(", ")
        )));
    }
    Ok(value)
}

/// Parses and validates a config document. Relative dataset paths resolve
/// against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = decode_toml(text)?;
    cfg.dataset.resolve_paths(base_dir);
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| FedError::io(path, 0, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}
