//! Experiment configuration, metrics, result files and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod output;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use config::{DataConfig, DataSource, ExperimentConfig, OutputConfig, PartitionKind, ProtocolOptions, Seeds, TransportConfig};
pub use metrics::{balanced_accuracy, mean_std, MetricsRecord};
pub use output::{build_id, learning_curve_svg, metrics_csv, summary_json, write_outputs, Evaluation, SCHEMA_VERSION};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
