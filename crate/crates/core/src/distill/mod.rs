//! Label-free distillation losses and the masked SGD trainer.
//!
//! In the default mode the student learns from two teacher signals only:
//! the teacher's argmax as a one-hot target (`L_oh`) and the teacher's
//! feature map (`L_m = MSE(m_t, m_s / T)`), combined as `L_oh + α·L_m`.

mod losses;
mod train;

pub use losses::{
    feature_kd, kd_soft_term, loss_feature_kd, loss_kd_classical, loss_oh, one_hot, pseudo_onehot, soft_targets,
};
pub use train::{
    accuracy, cosine_lr, evaluate_components, read_records, train, write_records, EpochMetrics, TrainData,
    TrainOutcome, RECORD_HEADER,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, what: String },
    #[error("mode {0} needs {1}")]
    Missing(&'static str, &'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run record csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// `L_oh + α·L_m` with teacher pseudo-labels.
    #[default]
    Lnpt,
    /// `CE(y) + α·CE(σ(f_t / T))` with true labels.
    ClassicalKd,
    /// Cross-entropy on true labels only.
    TrueLabel,
    /// `L_oh` alone.
    OhOnly,
    /// `α·L_m` alone.
    FmOnly,
}

impl DistillMode {
    pub const ALL: [DistillMode; 5] = [
        DistillMode::Lnpt,
        DistillMode::ClassicalKd,
        DistillMode::TrueLabel,
        DistillMode::OhOnly,
        DistillMode::FmOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Lnpt => "lnpt",
            DistillMode::ClassicalKd => "classical_kd",
            DistillMode::TrueLabel => "true_label",
            DistillMode::OhOnly => "oh_only",
            DistillMode::FmOnly => "fm_only",
        }
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, DistillMode::ClassicalKd | DistillMode::TrueLabel)
    }

    pub fn needs_teacher(self) -> bool {
        self != DistillMode::TrueLabel
    }

    /// Weights `(w_oh, w_m)` with `L_total = w_oh·L_oh + w_m·L_m`.
    pub fn weights(self, alpha: f64) -> (f64, f64) {
        match self {
            DistillMode::Lnpt | DistillMode::ClassicalKd => (1.0, alpha),
            DistillMode::TrueLabel | DistillMode::OhOnly => (1.0, 0.0),
            DistillMode::FmOnly => (0.0, alpha),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DistillMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Set per run from the master seed.
    #[serde(skip)]
    pub seed: u64,
    pub mode: DistillMode,
    /// Divide the teacher map by `T` as well.
    pub symmetric_temp: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            temperature: 4.0,
            epochs: 30,
            lr: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
            mode: DistillMode::Lnpt,
            symmetric_temp: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DistillError::Config(m.to_string()));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must lie in [0, lr]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// One training epoch's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    /// Epoch mean of the hard-target term.
    pub loss_oh: f64,
    /// Epoch mean of the second term (feature loss, or the soft-target term
    /// in classical KD mode).
    pub loss_m: f64,
    pub loss_total: f64,
    pub test_accuracy: f64,
    pub dtd: f64,
    /// Mean `‖m_t − m_s‖²` over the evaluation set.
    pub mean_lm: f64,
    pub lr: f64,
}
