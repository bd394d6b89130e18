//! Datasets: synthetic generation, client partitioning, the binary
//! container and mini-batching.

mod batch;
mod container;
mod partition;
mod synthetic;

pub use batch::{batch_iter, Batch, BatchIter};
pub use container::{load_container, read_container, save_container, write_container, ContainerHeader, CONTAINER_MAGIC};
pub use partition::{partition, PartitionMode, PartitionSpec};
pub use synthetic::{class_template, generate_synthetic, SyntheticSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("partition left client {client} without samples after {attempts} draws")]
    EmptyShard { client: usize, attempts: usize },
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("truncated container: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("container has {extra} bytes past the checksum")]
    TrailingBytes { extra: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Labelled images `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Validation(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::Validation(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Validation(format!("label {bad} not below class count {classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Sample count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
