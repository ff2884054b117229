use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::data::ScoreSampling;
use crate::distill::{DistillConfig, DistillMode};
use crate::model::PRESETS;
use crate::pruning::{Criterion, LnptHessian, PruneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Spirals,
    Blobs,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    /// Blob dimension.
    pub dim: usize,
    /// Blob standard deviation.
    pub spread: f64,
    /// Spiral noise.
    pub noise: f64,
    /// Generator and split seed.
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Keep only the first `limit` training rows.
    pub limit: Option<usize>,
    /// Held-out fraction when no test files are given.
    pub test_fraction: f64,
    pub standardize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Spirals,
            classes: 4,
            per_class: 500,
            dim: 8,
            spread: 1.0,
            noise: 0.05,
            seed: 0,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            path: None,
            test_path: None,
            limit: None,
            test_fraction: 0.2,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub preset: String,
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            preset: "mlp-teacher".into(),
            epochs: 30,
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    /// Supervised trainer settings for the teacher.
    pub fn train_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            lr: self.lr,
            lr_min: self.lr_min,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
            mode: DistillMode::TrueLabel,
            ..DistillConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub preset: String,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            preset: "mlp-small".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Test rows used for the NTK and sensitivity drift.
    pub ntk_samples: usize,
    /// Test rows used for the learning-gap step.
    pub gap_samples: usize,
    /// Step size of the learning-gap probe; the distillation lr if unset.
    pub gap_eta: Option<f64>,
    /// Skip the NTK when `N·K·P` exceeds this.
    pub ntk_budget: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            ntk_samples: 8,
            gap_samples: 8,
            gap_eta: None,
            ntk_budget: 5_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub prune: PruneConfig,
    pub distill: DistillConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output: PathBuf::from("runs"),
            seeds: vec![0, 1, 2, 3, 4],
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            prune: PruneConfig::default(),
            distill: DistillConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub ratio: Option<f64>,
    pub criterion: Option<Criterion>,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub mode: Option<DistillMode>,
    pub score_sampling: Option<ScoreSampling>,
    pub lnpt_hessian: Option<LnptHessian>,
    pub output: Option<PathBuf>,
}

pub const OUTPUT_ENV: &str = "LNPT_OUT";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                HarnessError::Usage(format!("config file {} not found", path.display()))
            } else {
                HarnessError::io(path, e)
            }
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies overrides, then `LNPT_OUT`, then re-validates.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(r) = o.ratio {
            self.prune.ratio = r;
        }
        if let Some(c) = o.criterion {
            self.prune.criterion = c;
        }
        if let Some(a) = o.alpha {
            self.distill.alpha = a;
        }
        if let Some(t) = o.temperature {
            self.distill.temperature = t;
        }
        if let Some(e) = o.epochs {
            self.distill.epochs = e;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = o.mode {
            self.distill.mode = m;
        }
        if let Some(s) = o.score_sampling {
            self.prune.score_sampling = s;
        }
        if let Some(h) = o.lnpt_hessian {
            self.prune.lnpt_hessian = h;
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
        if let Some(out) = std::env::var_os(OUTPUT_ENV) {
            self.output = PathBuf::from(out);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        for (role, name) in [("teacher", &self.teacher.preset), ("student", &self.student.preset)] {
            if !PRESETS.contains(&name.as_str()) {
                return Err(HarnessError::Config(format!(
                    "unknown {role} preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )));
            }
        }
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(HarnessError::Config("dataset.classes must be at least 2".into()));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(HarnessError::Config("dataset.test_fraction must lie in (0, 1)".into()));
        }
        if matches!(d.kind, DatasetKind::Spirals | DatasetKind::Blobs) && d.per_class == 0 {
            return Err(HarnessError::Config("dataset.per_class must be positive".into()));
        }
        if self.diagnostics.ntk_samples == 0 || self.diagnostics.gap_samples == 0 {
            return Err(HarnessError::Config("diagnostics sample counts must be positive".into()));
        }
        if let Some(eta) = self.diagnostics.gap_eta {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(HarnessError::Config("diagnostics.gap_eta must be > 0".into()));
            }
        }
        self.teacher
            .train_config(0)
            .validate()
            .map_err(|e| HarnessError::Config(format!("teacher: {e}")))?;
        self.prune.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.distill.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Label used for this run in reports.
    pub fn method_label(&self) -> String {
        let c = self.prune.criterion.name();
        match self.distill.mode {
            DistillMode::Lnpt => c.to_string(),
            m => format!("{c}+{m}"),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output.join(format!("seed-{seed}"))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.output.join("teacher.ckpt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("[distill]\nalpah = 2.0\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
        assert!(err.to_string().contains("alpah"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [3]\n[prune]\nratio = 0.95\ncriterion = \"snip\"\n").unwrap();
        assert_eq!(cfg.seeds, vec![3]);
        assert_eq!(cfg.prune.ratio, 0.95);
        assert_eq!(cfg.prune.criterion, Criterion::Snip);
        assert_eq!(cfg.distill, DistillConfig::default());
    }

    #[test]
    fn empty_seeds_and_bad_preset_fail() {
        assert!(ExperimentConfig::from_toml("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[student]\npreset = \"vgg\"\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_labels() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            ratio: Some(0.5),
            mode: Some(DistillMode::OhOnly),
            criterion: Some(Criterion::Random),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.prune.ratio, 0.5);
        assert_eq!(cfg.method_label(), "random+oh_only");
        assert!(cfg.apply(&Overrides { ratio: Some(1.5), ..Overrides::default() }).is_err());
    }
}
