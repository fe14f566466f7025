//! Latent cross-attention encoders shared by every modality, per-task
//! classification heads and the server-side cross-modal attention.

mod block;
mod checkpoint;
mod embed;
mod graph;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, TensorError};

pub use block::{count_block_multiplies, BlockShape};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use embed::{fourier_features, PaddedInput};
pub use graph::Graph;
pub use model::{CrossAttentionOutput, Model, UnimodalOutput};
pub use train::{check_disjoint, train, TrainReport, TrainSchedule};

pub type ModalityId = usize;
pub type TaskId = usize;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("modality {0} is not registered")]
    UnknownModality(ModalityId),
    #[error("task {0} is not registered")]
    UnknownTask(TaskId),
    #[error("modality {modality} expects {expected:?}, got {got:?}")]
    ModalityShape {
        modality: ModalityId,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("latent shape {got:?} does not match configured {expected:?}")]
    LatentShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("cross-modal attention needs at least 2 latents, got {0}")]
    TooFewModalities(usize),
    #[error("task {task} expects modalities {expected:?}, got {got:?}")]
    ModalitySet {
        task: TaskId,
        expected: Vec<ModalityId>,
        got: Vec<ModalityId>,
    },
    #[error("parameter `{0}` missing from store")]
    MissingParam(String),
    #[error("sample {0} appears in more than one split")]
    DataLeak(u64),
    #[error("label {label} out of range for task {task}")]
    Label { task: TaskId, label: usize },
    #[error("empty training split")]
    EmptySplit,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters. Attention heads use `latent_dim` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceiverConfig {
    /// Number of latent rows.
    pub latents: usize,
    /// Width of each latent row.
    pub latent_dim: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    /// Latent self-attention layers after the cross-attention.
    pub depth: usize,
    /// Feed-forward hidden width as a multiple of `latent_dim`.
    pub ffn_mult: usize,
    /// Fourier bands in the position encoding; each adds a sin and a cos column.
    pub fourier_bands: usize,
}

impl PerceiverConfig {
    /// Small configuration for tests and desk experiments.
    pub fn desk() -> Self {
        Self {
            latents: 4,
            latent_dim: 8,
            cross_heads: 1,
            self_heads: 2,
            depth: 1,
            ffn_mult: 2,
            fourier_bands: 2,
        }
    }

    /// 20 latents of width 64, one cross-attention head, six self-attention heads.
    pub fn full_scale() -> Self {
        Self {
            latents: 20,
            latent_dim: 64,
            cross_heads: 1,
            self_heads: 6,
            depth: 1,
            ffn_mult: 2,
            fourier_bands: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.latent_dim
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (self.latents, self.latent_dim)
    }
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    /// Modalities the task fuses, by registry index.
    pub modalities: Vec<ModalityId>,
}

/// Registered modalities and tasks; fixes the common padded input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
    pub fourier_bands: usize,
}

impl Registry {
    pub fn modality(&self, id: ModalityId) -> Result<&ModalitySpec, ModelError> {
        self.modalities
            .get(id)
            .ok_or(ModelError::UnknownModality(id))
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskSpec, ModelError> {
        self.tasks.get(id).ok_or(ModelError::UnknownTask(id))
    }

    /// Rows of the padded input: the largest registered row count.
    pub fn max_rows(&self) -> usize {
        self.modalities.iter().map(|m| m.rows).max().unwrap_or(1)
    }

    /// Width of the padded input: widest raw modality plus the one-hot and
    /// position blocks.
    pub fn padded_width(&self) -> usize {
        let raw = self.modalities.iter().map(|m| m.cols).max().unwrap_or(0);
        raw + self.modalities.len() + 2 * self.fourier_bands
    }
}

/// One raw sensor reading.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTensor {
    pub modality: ModalityId,
    pub task: TaskId,
    pub data: Matrix,
}

/// Fixed-shape latent array, the unit of latent traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix(pub Matrix);

impl LatentMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// A labelled multimodal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub task: TaskId,
    pub label: usize,
    pub inputs: Vec<ModalityTensor>,
}

impl Sample {
    pub fn input(&self, modality: ModalityId) -> Option<&ModalityTensor> {
        self.inputs.iter().find(|m| m.modality == modality)
    }
}
