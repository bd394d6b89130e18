use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::autodiff::AdamConfig;
use crate::data::{PartitionMode, PartitionSpec};
use crate::models::ModelConfig;
use crate::privacy::DpConfig;
use crate::protocol::{BodyAverage, Settings, Variant};
use crate::transport::{TransportKind, WireDtype, DEFAULT_MAX_PAYLOAD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Container,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    #[default]
    Dirichlet,
    Natural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic training pool, split across clients.
    pub train_samples: usize,
    /// Synthetic shared test set.
    pub test_samples: usize,
    pub noise: f64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub clients: usize,
    pub partition: PartitionKind,
    pub alpha: f64,
    /// Index lists for the natural partition, one per client.
    pub natural_indices: Option<Vec<Vec<usize>>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_samples: 1200,
            test_samples: 400,
            noise: 0.35,
            train_path: None,
            test_path: None,
            clients: 6,
            partition: PartitionKind::Dirichlet,
            alpha: 0.5,
            natural_indices: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub sampling: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 0, init: 1, sampling: 2, noise: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub wire_dtype: WireDtype,
    pub max_payload: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { kind: TransportKind::Inproc, wire_dtype: WireDtype::F32, max_payload: DEFAULT_MAX_PAYLOAD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolOptions {
    pub body_average: BodyAverage,
    /// Average the softmax over blocks `1..=S` at evaluation.
    pub eval_ensemble: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self { body_average: BodyAverage::RoundStart, eval_ensemble: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), emit_plots: false }
    }
}

/// A complete, self-describing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub rounds: u32,
    /// Unifying rounds happen when `round % unify_period == 0`.
    pub unify_period: u32,
    pub batch_size: usize,
    /// Evaluate every this many rounds; 0 evaluates only after the last.
    pub eval_every: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: AdamConfig,
    pub privacy: DpConfig,
    pub seeds: Seeds,
    pub transport: TransportConfig,
    pub protocol: ProtocolOptions,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fesvibs,
            rounds: 50,
            unify_period: 2,
            batch_size: 32,
            eval_every: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            optimizer: AdamConfig::default(),
            privacy: DpConfig::default(),
            seeds: Seeds::default(),
            transport: TransportConfig::default(),
            protocol: ProtocolOptions::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sets every seed stream from one number.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = Seeds { data: seed, init: seed, sampling: seed, noise: seed };
    }

    /// Every violated constraint, in one list.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        let m = &self.model;
        if m.sample_limit > m.materialized_blocks() {
            out.push(format!(
                "model.sample_limit ({}) exceeds the {} available blocks",
                m.sample_limit,
                m.materialized_blocks()
            ));
        }
        if self.unify_period == 0 {
            out.push("unify_period must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if let Err(e) = self.optimizer.validate() {
            out.push(format!("optimizer: {e}"));
        }
        if self.privacy.enabled {
            if let Err(e) = self.privacy.validate() {
                out.push(format!("privacy: {e}"));
            }
            if !self.variant.is_split() {
                out.push(format!("privacy applies to split variants, not {}", self.variant));
            }
        }
        let d = &self.data;
        if d.clients == 0 {
            out.push("data.clients must be at least 1".into());
        }
        match d.source {
            DataSource::Synthetic => {
                if d.train_samples < d.clients {
                    out.push(format!("data.train_samples ({}) is fewer than data.clients ({})", d.train_samples, d.clients));
                }
                if d.test_samples == 0 {
                    out.push("data.test_samples must be positive".into());
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    out.push("data.noise must be finite and non-negative".into());
                }
            }
            DataSource::Container => {
                if d.train_path.is_none() || d.test_path.is_none() {
                    out.push("data.train_path and data.test_path are required for container data".into());
                }
            }
        }
        match d.partition {
            PartitionKind::Dirichlet if !(d.alpha > 0.0 && d.alpha.is_finite()) => {
                out.push(format!("data.alpha must be positive, got {}", d.alpha));
            }
            PartitionKind::Natural if d.natural_indices.is_none() => {
                out.push("data.natural_indices is required for the natural partition".into());
            }
            _ => {}
        }
        if self.transport.max_payload == 0 {
            out.push("transport.max_payload must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(p))
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            variant: self.variant,
            model: self.model.clone(),
            optimizer: self.optimizer,
            privacy: self.privacy.clone(),
            wire: self.transport.wire_dtype,
            max_payload: self.transport.max_payload,
            body_average: self.protocol.body_average,
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = match self.data.partition {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::Dirichlet => PartitionMode::Dirichlet { alpha: self.data.alpha },
            PartitionKind::Natural => PartitionMode::Natural { indices: self.data.natural_indices.clone().unwrap_or_default() },
        };
        PartitionSpec { mode, n_clients: self.data.clients, seed: crate::seed::derive(self.seeds.data, &[0x9A27]) }
    }
}
