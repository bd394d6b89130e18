//! Client and server state machines of the split protocol family, block
//! sampling, aggregation, round execution and evaluation.

mod aggregate;
mod client;
mod eval;
mod experiment;
mod round;
mod server;

pub use aggregate::{average_body, fedavg, unify_heads_tails, BodyAverage};
pub use client::{ClientState, ClientStepReport, OwnModel};
pub use eval::{client_model, evaluate_clients, predict};
pub use experiment::{build_datasets, run_experiment, ExperimentError, ExperimentOutput};
pub use round::{run_round, RoundOutcome, RoundPlan};
pub use server::{ServerState, ServerStepReport, WorkingCopy};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, TensorError};
use crate::data::DataError;
use crate::models::{ModelConfig, ModelError};
use crate::privacy::{DpConfig, PrivacyError};
use crate::transport::{TransportError, WireDtype, DEFAULT_MAX_PAYLOAD};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol state error: expected {expected}, received {got}")]
    OutOfOrder { expected: &'static str, got: String },
    #[error("rejected tensor: {0}")]
    Shape(String),
    #[error("no update record for client {0}")]
    MissingRecord(usize),
    #[error("parameter layouts diverge: {0}")]
    Divergent(String),
    #[error("peer reported error {code}: {detail}")]
    Remote { code: u32, detail: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ProtocolError {
    /// Code carried by an `Error` message when this error is reported to
    /// the peer.
    pub fn wire_code(&self) -> u32 {
        match self {
            Self::Config(_) => 1,
            Self::OutOfOrder { .. } => 2,
            Self::Shape(_) => 3,
            Self::MissingRecord(_) | Self::Divergent(_) => 4,
            Self::Remote { code, .. } => *code,
            Self::Transport(_) => 5,
            Self::Model(_) | Self::Tensor(_) | Self::Privacy(_) | Self::Data(_) => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Each client trains its own full model; nothing is shared.
    Local,
    /// Split learning with a class token through every body block.
    Slvit,
    /// Slvit plus unifying rounds.
    Festa,
    /// Split learning with per-round block sampling and a projection network.
    Svibs,
    /// Svibs plus unifying rounds.
    Fesvibs,
    /// Monolithic federated averaging of the whole stack every round.
    FedavgMono,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Self::Local, Self::Slvit, Self::Festa, Self::Svibs, Self::Fesvibs, Self::FedavgMono];

    pub fn label(self) -> &'static str {
        match self {
            Self::Local => "Local",
            Self::Slvit => "SLViT",
            Self::Festa => "FeSTA",
            Self::Svibs => "SViBS",
            Self::Fesvibs => "FeSViBS",
            Self::FedavgMono => "FedAvg",
        }
    }

    /// Head/body/tail split across the transport.
    pub fn is_split(self) -> bool {
        matches!(self, Self::Slvit | Self::Festa | Self::Svibs | Self::Fesvibs)
    }

    pub fn samples_blocks(self) -> bool {
        matches!(self, Self::Svibs | Self::Fesvibs)
    }

    pub fn unifies(self) -> bool {
        matches!(self, Self::Festa | Self::Fesvibs)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Everything a protocol step needs besides the states themselves.
#[derive(Clone, Debug)]
pub struct Settings {
    pub variant: Variant,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub privacy: DpConfig,
    pub wire: WireDtype,
    /// Frame payload limit on stream links.
    pub max_payload: usize,
    pub body_average: BodyAverage,
}

impl Settings {
    pub fn new(variant: Variant, model: ModelConfig) -> Self {
        Self {
            variant,
            model,
            optimizer: AdamConfig::default(),
            privacy: DpConfig::default(),
            wire: WireDtype::F32,
            max_payload: DEFAULT_MAX_PAYLOAD,
            body_average: BodyAverage::default(),
        }
    }
}

/// Uniform draw from `{1, ..., limit}`.
pub fn sample_block<R: Rng + ?Sized>(rng: &mut R, limit: usize, blocks: usize) -> Result<usize, ProtocolError> {
    if limit == 0 || limit > blocks {
        return Err(ProtocolError::Config(format!("sampling limit {limit} must lie in 1..={blocks}")));
    }
    Ok(rng.random_range(1..=limit))
}
