//! Experiment orchestration: configuration, seeding and the
//! `train-teacher → prune → distill → report` pipeline.
//!
//! Output layout under the configured root:
//!
//! ```text
//! teacher.ckpt  teacher_runs.csv
//! seed-<s>/student.ckpt  sparsity.csv  runs.csv  diagnostics.csv  student_trained.ckpt
//! summary.json
//! ```

mod config;
mod pipeline;
mod report;

pub use config::{DatasetConfig, DatasetKind, DiagnosticsConfig, ExperimentConfig, Overrides, StudentConfig, TeacherConfig};
pub use pipeline::{
    distill_seed, load_splits, prune_seed, run_all, run_distill, run_prune, train_teacher, PruneReport, SeedResult,
    Splits, Summary, TeacherReport,
};
pub use report::{reference_rows, report, ReferenceRow, ReportOutput, TableRow, REFERENCE_CSV};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataError;
use crate::diagnostics::DiagError;
use crate::distill::DistillError;
use crate::model::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::pruning::PruneError;
use crate::tensor::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Tensor(t) => tensor_code(t),
        _ => EXIT_USAGE,
    }
}

impl HarnessError {
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Process exit code: 2 usage/config, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Config(_) => EXIT_USAGE,
            HarnessError::Io { .. } => EXIT_IO,
            HarnessError::Data(e) => match e {
                DataError::Invalid(_) | DataError::LabelRange { .. } => EXIT_USAGE,
                _ => EXIT_IO,
            },
            HarnessError::Model(e) => model_code(e),
            HarnessError::Checkpoint(e) => match e {
                CheckpointError::Model(m) => model_code(m),
                _ => EXIT_IO,
            },
            HarnessError::Prune(e) => match e {
                PruneError::NonFinite { .. } => EXIT_NUMERIC,
                PruneError::Tensor(t) => tensor_code(t),
                PruneError::Model(m) => model_code(m),
                _ => EXIT_USAGE,
            },
            HarnessError::Distill(e) => match e {
                DistillError::NonFinite { .. } => EXIT_NUMERIC,
                DistillError::Io { .. } | DistillError::Csv(_) => EXIT_IO,
                DistillError::Tensor(t) => tensor_code(t),
                DistillError::Model(m) => model_code(m),
                _ => EXIT_USAGE,
            },
            HarnessError::Diag(e) => match e {
                DiagError::Io { .. } | DiagError::Csv(_) => EXIT_IO,
                DiagError::Tensor(t) => tensor_code(t),
                DiagError::Model(m) => model_code(m),
                _ => EXIT_USAGE,
            },
        }
    }
}

/// Independent stream seed for one concern, from the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(master.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Stream labels used by the pipeline.
pub mod streams {
    pub const STUDENT_INIT: &str = "student-init";
    pub const TEACHER_INIT: &str = "teacher-init";
    pub const TEACHER_ORDER: &str = "teacher-batch-order";
    pub const BATCH_ORDER: &str = "batch-order";
    pub const HUTCHINSON: &str = "hutchinson";
    pub const RANDOM_PRUNE: &str = "random-prune";
    pub const SCORE_BATCH: &str = "score-batch";
}
