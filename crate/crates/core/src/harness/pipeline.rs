use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, ExperimentConfig};
use super::{derive_seed, streams, HarnessError, Result};
use crate::data::{load_csv, load_idx, score_batch, synth_blobs, synth_spirals, Dataset, ScoreSampling, Split, Standardizer};
use crate::diagnostics::{
    learning_gap_step, mean_feature_gap, ntk, s_drift, sensitivity, weight_distance, write_diagnostics,
    DiagnosticsRow, MAX_JACOBIAN_ENTRIES,
};
use crate::distill::{
    accuracy, evaluate_components, train, write_records, DistillError, EpochMetrics, RunRecord, TrainData,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::{forward, init, preset, ForwardOutput, ModelSpec, Parameters};
use crate::pruning::{prune, Criterion, LayerDensity, PruneMask, ScoreContext};
use crate::tensor::{argmax, Tensor};

/// Standardized train and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
}

impl Splits {
    pub fn classes(&self) -> usize {
        self.train.classes()
    }

    fn test_labels(&self) -> Result<&[usize]> {
        self.test
            .labels()
            .ok_or_else(|| HarnessError::Usage("test split has no labels".into()))
    }
}

fn require(path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| HarnessError::Usage(format!("dataset.{field} is required")))?;
    if !p.exists() {
        return Err(HarnessError::Usage(format!("dataset file {} not found", p.display())));
    }
    Ok(p)
}

fn relabel(ds: Dataset, classes: usize, split: Split) -> Result<Dataset> {
    Ok(Dataset::new(
        ds.raw_inputs().to_vec(),
        ds.shape(),
        ds.labels().map(<[usize]>::to_vec),
        classes,
        split,
    )?)
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let split_seed = derive_seed(d.seed, "split");
    let (mut train, mut test) = match d.kind {
        DatasetKind::Spirals => synth_spirals(d.classes, d.per_class, d.noise, d.seed)?.split_train_test(d.test_fraction, split_seed)?,
        DatasetKind::Blobs => {
            synth_blobs(d.classes, d.per_class, d.dim, d.spread, d.seed)?.split_train_test(d.test_fraction, split_seed)?
        }
        DatasetKind::Idx => {
            let all = load_idx(&require(&d.images, "images")?, &require(&d.labels, "labels")?)?;
            let all = relabel(all, d.classes, Split::Train)?;
            match (&d.test_images, &d.test_labels) {
                (Some(_), Some(_)) => {
                    let test = load_idx(&require(&d.test_images, "test_images")?, &require(&d.test_labels, "test_labels")?)?;
                    (all, relabel(test, d.classes, Split::Test)?)
                }
                _ => all.split_train_test(d.test_fraction, split_seed)?,
            }
        }
        DatasetKind::Csv => {
            let all = load_csv(&require(&d.path, "path")?, Some(d.classes))?;
            match &d.test_path {
                Some(_) => {
                    let test = load_csv(&require(&d.test_path, "test_path")?, Some(d.classes))?;
                    (relabel(all, d.classes, Split::Train)?, relabel(test, d.classes, Split::Test)?)
                }
                None => all.split_train_test(d.test_fraction, split_seed)?,
            }
        }
    };
    if let Some(limit) = d.limit {
        if limit < train.len() {
            let idx: Vec<usize> = (0..limit).collect();
            train = train.subset(&idx, Split::Train);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Usage("dataset yields an empty train or test split".into()));
    }
    let standardizer = if d.standardize {
        let s = Standardizer::fit(&train);
        train.standardize(&s)?;
        test.standardize(&s)?;
        Some(s)
    } else {
        None
    };
    Ok(Splits {
        train,
        test,
        standardizer,
    })
}

fn spec_for(name: &str, splits: &Splits) -> Result<ModelSpec> {
    Ok(preset(name, splits.train.shape(), splits.classes())?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TeacherReport {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub records: Vec<RunRecord>,
    pub test_accuracy: f64,
    pub path: PathBuf,
}

/// Supervised teacher training. Writes `teacher.ckpt` and `teacher_runs.csv`
/// into `out_dir`.
pub fn train_teacher(cfg: &ExperimentConfig, splits: &Splits, out_dir: &Path) -> Result<TeacherReport> {
    let spec = spec_for(&cfg.teacher.preset, splits)?;
    let seed = cfg.teacher.seed;
    let params = init(&spec, derive_seed(seed, streams::TEACHER_INIT));
    let tcfg = cfg.teacher.train_config(derive_seed(seed, streams::TEACHER_ORDER));
    let labels = splits
        .train
        .labels()
        .ok_or_else(|| HarnessError::Usage("teacher training needs labels".into()))?;
    let data = TrainData::labeled(splits.train.unlabeled(), labels, None);
    let test_labels = splits.test_labels()?;
    let mask = PruneMask::dense(params.layout());
    let mut observer = |_: usize, p: &Parameters| -> crate::distill::Result<EpochMetrics> {
        Ok(EpochMetrics {
            test_accuracy: accuracy(&spec, p, splits.test.unlabeled(), test_labels)?,
            ..EpochMetrics::default()
        })
    };
    let outcome = train(&spec, params, &mask, &data, &tcfg, &mut observer)?;
    let test_accuracy = outcome.records.last().map_or(0.0, |r| r.test_accuracy);

    create_dir(out_dir)?;
    let mut ckpt = Checkpoint::from_params(&spec, &outcome.params, seed);
    ckpt.preprocessing = splits.standardizer.clone();
    ckpt.meta.insert("role".into(), "teacher".into());
    ckpt.meta.insert("epochs".into(), cfg.teacher.epochs.to_string());
    ckpt.meta.insert("test_accuracy".into(), crate::sig6(test_accuracy));
    let path = out_dir.join("teacher.ckpt");
    ckpt.save(&path)?;
    write_records(&out_dir.join("teacher_runs.csv"), &outcome.records)?;
    Ok(TeacherReport {
        spec,
        params: outcome.params,
        records: outcome.records,
        test_accuracy,
        path,
    })
}

pub fn load_teacher(path: &Path) -> Result<(ModelSpec, Parameters)> {
    if !path.exists() {
        return Err(HarnessError::Usage(format!(
            "teacher checkpoint {} not found (run train-teacher first)",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?.params()?)
}

/// Frozen teacher outputs on both splits.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    pub train: ForwardOutput,
    pub test: ForwardOutput,
}

impl TeacherCache {
    pub fn new(spec: &ModelSpec, params: &Parameters, splits: &Splits) -> Result<Self> {
        Ok(TeacherCache {
            train: forward(spec, params, &splits.train.unlabeled().all())?,
            test: forward(spec, params, &splits.test.unlabeled().all())?,
        })
    }
}

fn check_feature_dims(teacher: &ModelSpec, student: &ModelSpec) -> Result<()> {
    if teacher.feature_dim() != student.feature_dim() {
        return Err(HarnessError::Config(format!(
            "teacher feature width {} differs from student feature width {}",
            teacher.feature_dim(),
            student.feature_dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct PruneReport {
    pub seed: u64,
    pub kept: usize,
    pub total: usize,
    pub density: f64,
    pub checksum: String,
    pub layers: Vec<LayerDensity>,
    #[serde(skip)]
    pub mask: PruneMask,
}

fn write_sparsity(path: &Path, layers: &[LayerDensity], kept: usize, total: usize) -> Result<()> {
    let mut text = String::from("tensor,kept,total,density,prunable\n");
    for l in layers {
        let density = if l.total == 0 { 0.0 } else { l.kept as f64 / l.total as f64 };
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            l.name,
            l.kept,
            l.total,
            crate::sig6(density),
            l.prunable
        ));
    }
    let density = if total == 0 { 0.0 } else { kept as f64 / total as f64 };
    text.push_str(&format!("all_prunable,{kept},{total},{},true\n", crate::sig6(density)));
    write_text(path, &text)
}

/// Scores a freshly initialized student against the teacher and writes the
/// masked checkpoint and sparsity report into `seed_dir`.
pub fn prune_seed(
    cfg: &ExperimentConfig,
    splits: &Splits,
    teacher: &(ModelSpec, Parameters),
    cache: &TeacherCache,
    seed: u64,
    seed_dir: &Path,
) -> Result<PruneReport> {
    let spec = spec_for(&cfg.student.preset, splits)?;
    check_feature_dims(&teacher.0, &spec)?;
    let params = init(&spec, derive_seed(seed, streams::STUDENT_INIT));
    let classes = splits.classes();

    let pseudo: Vec<usize>;
    let class_of = match cfg.prune.score_sampling {
        ScoreSampling::BalancedTrue => splits.train.labels(),
        ScoreSampling::BalancedPseudo => {
            let k = cache.train.logits.shape()[1];
            pseudo = cache.train.logits.data().chunks(k).map(argmax).collect();
            Some(pseudo.as_slice())
        }
        ScoreSampling::Uniform => None,
    };
    let idx = score_batch(
        splits.train.len(),
        classes,
        cfg.prune.score_sampling,
        class_of,
        cfg.prune.score_per_class,
        derive_seed(seed, streams::SCORE_BATCH),
    )?;
    let batch = splits.train.unlabeled().batch(&idx);
    let t_out = forward(&teacher.0, &teacher.1, &batch)?;
    let labels: Option<Vec<usize>> = match (cfg.prune.labeled_baseline, splits.train.labels()) {
        (true, Some(l)) => Some(idx.iter().map(|&i| l[i]).collect()),
        (true, None) => return Err(HarnessError::Usage("labeled_baseline needs labels".into())),
        _ => None,
    };
    let ctx = ScoreContext {
        spec: &spec,
        params: &params,
        batch: &batch,
        teacher: &t_out,
        labels: labels.as_deref(),
    };
    let mut pcfg = cfg.prune.clone();
    pcfg.seed = derive_seed(
        seed,
        if pcfg.criterion == Criterion::Random {
            streams::RANDOM_PRUNE
        } else {
            streams::HUTCHINSON
        },
    );
    let (_, mask) = prune(&pcfg, &ctx)?;
    let mut student = params;
    mask.apply(&mut student);

    create_dir(seed_dir)?;
    let layout = student.layout();
    let checksum = format!("{:016x}", mask.checksum());
    let mut ckpt = Checkpoint::from_params(&spec, &student, seed);
    ckpt.preprocessing = splits.standardizer.clone();
    ckpt.mask = Some(mask.per_tensor(layout));
    ckpt.meta.insert("role".into(), "pruned-student".into());
    ckpt.meta.insert("criterion".into(), pcfg.criterion.name().into());
    ckpt.meta.insert("ratio".into(), pcfg.ratio.to_string());
    ckpt.meta.insert("score_batch".into(), idx.len().to_string());
    ckpt.meta.insert("mask_checksum".into(), checksum.clone());
    ckpt.save(&seed_dir.join("student.ckpt"))?;
    let layers = mask.layer_density(layout);
    write_sparsity(&seed_dir.join("sparsity.csv"), &layers, mask.kept_count, mask.total_count)?;
    Ok(PruneReport {
        seed,
        kept: mask.kept_count,
        total: mask.total_count,
        density: mask.density(),
        checksum,
        layers,
        mask,
    })
}

/// Prunes every seed. Returns reports in seed order.
pub fn run_prune(cfg: &ExperimentConfig, splits: &Splits, teacher_path: &Path) -> Result<Vec<PruneReport>> {
    let teacher = load_teacher(teacher_path)?;
    let cache = TeacherCache::new(&teacher.0, &teacher.1, splits)?;
    cfg.seeds
        .par_iter()
        .map(|&s| prune_seed(cfg, splits, &teacher, &cache, s, &cfg.seed_dir(s)))
        .collect()
}

/// Per-seed outcome of a distillation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_accuracy: f64,
    pub initial_loss_m: f64,
    pub final_loss_m: f64,
    pub mask_checksum: String,
    /// Epochs `0..=N`; row 0 is the pruned initialization.
    #[serde(skip)]
    pub records: Vec<RunRecord>,
    #[serde(skip)]
    pub diagnostics: Vec<DiagnosticsRow>,
}

fn diag_to_distill(e: crate::diagnostics::DiagError) -> DistillError {
    use crate::diagnostics::DiagError;
    match e {
        DiagError::Tensor(t) => DistillError::Tensor(t),
        DiagError::Model(m) => DistillError::Model(m),
        other => DistillError::Config(other.to_string()),
    }
}

fn head_rows(ds: &Dataset, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..n.min(ds.len())).collect();
    ds.unlabeled().batch(&idx)
}

/// Which reference `dᵀd` is measured against.
pub fn dtd_reference(teacher: &ModelSpec, student: &ModelSpec) -> &'static str {
    if teacher == student {
        "teacher"
    } else {
        "init"
    }
}

/// Distills the pruned student stored in `seed_dir`.
pub fn distill_seed(
    cfg: &ExperimentConfig,
    splits: &Splits,
    teacher: &(ModelSpec, Parameters),
    cache: &TeacherCache,
    seed: u64,
    seed_dir: &Path,
) -> Result<SeedResult> {
    let student_path = seed_dir.join("student.ckpt");
    if !student_path.exists() {
        return Err(HarnessError::Usage(format!(
            "pruned student {} not found (run prune first)",
            student_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&student_path)?;
    let (spec, params) = ckpt.params()?;
    check_feature_dims(&teacher.0, &spec)?;
    let mask = match ckpt.flat_mask() {
        Some(keep) => PruneMask::from_flat(params.layout(), keep)?,
        None => PruneMask::dense(params.layout()),
    };
    let checksum = format!("{:016x}", mask.checksum());
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = derive_seed(seed, streams::BATCH_ORDER);
    let mode = dcfg.mode;
    let data = TrainData::for_mode(&splits.train, mode, Some(&cache.train));
    let test_labels = splits.test_labels()?;
    let test_inputs = splits.test.unlabeled().all();

    let reference: Vec<f64> = if dtd_reference(&teacher.0, &spec) == "teacher" {
        teacher.1.flat().to_vec()
    } else {
        params.flat().to_vec()
    };

    let diag = &cfg.diagnostics;
    let k = spec.classes;
    let p = params.len();
    let ntk_batch = head_rows(&splits.test, diag.ntk_samples);
    let ntk_enabled = ntk_batch.shape()[0] * k * p <= diag.ntk_budget;
    let gap_batch = head_rows(&splits.test, diag.gap_samples);
    let gap_teacher = forward(&teacher.0, &teacher.1, &gap_batch)?.features;
    let gap_enabled = p.saturating_mul(spec.feature_dim()) <= MAX_JACOBIAN_ENTRIES;
    let eta = diag.gap_eta.unwrap_or(dcfg.lr);
    let s0 = if ntk_enabled {
        Some(sensitivity(&params.classifier(), &ntk(&spec, &params, &ntk_batch, Some(mask.keep()))?)?)
    } else {
        None
    };

    let measure = |epoch: usize, p: &Parameters| -> crate::distill::Result<(EpochMetrics, DiagnosticsRow)> {
        let test_accuracy = accuracy(&spec, p, splits.test.unlabeled(), test_labels)?;
        let dtd = weight_distance(&reference, p.flat(), None).map_err(diag_to_distill)?;
        let mean_lm = mean_feature_gap(&spec, p, &test_inputs, &cache.test.features).map_err(diag_to_distill)?;
        let (pred, meas) = if gap_enabled {
            let g = learning_gap_step(&spec, p, &gap_batch, &gap_teacher, eta, Some(mask.keep()))
                .map_err(diag_to_distill)?;
            (Some(g.predicted_norm()), Some(g.measured_norm()))
        } else {
            (None, None)
        };
        let drift = match &s0 {
            Some(s0) => {
                let st = sensitivity(
                    &p.classifier(),
                    &ntk(&spec, p, &ntk_batch, Some(mask.keep())).map_err(diag_to_distill)?,
                )
                .map_err(diag_to_distill)?;
                Some(s_drift(&st, s0))
            }
            None => None,
        };
        Ok((
            EpochMetrics {
                test_accuracy,
                dtd,
                mean_lm,
            },
            DiagnosticsRow {
                epoch,
                dtd,
                mean_lm,
                delta_ell_pred: pred,
                delta_ell_meas: meas,
                s_drift: drift,
            },
        ))
    };

    let (m0, row0) = measure(0, &params)?;
    let (oh0, lm0) = evaluate_components(&spec, &params, &data, &dcfg)?;
    let (w_oh, w_m) = mode.weights(dcfg.alpha);
    let mut records = vec![RunRecord {
        epoch: 0,
        loss_oh: oh0,
        loss_m: lm0,
        loss_total: w_oh * oh0 + w_m * lm0,
        test_accuracy: m0.test_accuracy,
        dtd: m0.dtd,
        mean_lm: m0.mean_lm,
        lr: dcfg.lr,
    }];
    let mut diagnostics = vec![row0];
    let mut observer = |epoch: usize, p: &Parameters| -> crate::distill::Result<EpochMetrics> {
        let (m, row) = measure(epoch, p)?;
        diagnostics.push(row);
        Ok(m)
    };
    let outcome = train(&spec, params, &mask, &data, &dcfg, &mut observer)?;
    records.extend(outcome.records);

    write_records(&seed_dir.join("runs.csv"), &records)?;
    write_diagnostics(&seed_dir.join("diagnostics.csv"), &diagnostics)?;
    let mut out = Checkpoint::from_params(&spec, &outcome.params, seed);
    out.preprocessing = ckpt.preprocessing.clone();
    out.mask = ckpt.mask.clone();
    out.meta = ckpt.meta.clone();
    out.meta.insert("role".into(), "trained-student".into());
    out.meta.insert("mode".into(), mode.name().into());
    out.save(&seed_dir.join("student_trained.ckpt"))?;

    let last = records.last().expect("epoch 0 row");
    Ok(SeedResult {
        seed,
        final_accuracy: last.test_accuracy,
        initial_loss_m: records[0].loss_m,
        final_loss_m: last.loss_m,
        mask_checksum: checksum,
        records,
        diagnostics,
    })
}

/// Run summary written as `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub criterion: String,
    pub mode: String,
    pub ratio: f64,
    pub alpha: f64,
    pub temperature: f64,
    /// `(w_oh, w_m)` actually applied.
    pub loss_weights: (f64, f64),
    pub dtd_reference: String,
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_accuracy: f64,
    pub config: ExperimentConfig,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::io(path, e))
    }
}

/// Distills every seed and writes `summary.json` at the output root.
pub fn run_distill(cfg: &ExperimentConfig, splits: &Splits, teacher_path: &Path) -> Result<Summary> {
    let teacher = load_teacher(teacher_path)?;
    let cache = TeacherCache::new(&teacher.0, &teacher.1, splits)?;
    let seeds: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&s| distill_seed(cfg, splits, &teacher, &cache, s, &cfg.seed_dir(s)))
        .collect::<Result<_>>()?;
    let finals: Vec<f64> = seeds.iter().map(|s| s.final_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&finals);
    let student = spec_for(&cfg.student.preset, splits)?;
    let summary = Summary {
        method: cfg.method_label(),
        criterion: cfg.prune.criterion.name().into(),
        mode: cfg.distill.mode.name().into(),
        ratio: cfg.prune.ratio,
        alpha: cfg.distill.alpha,
        temperature: cfg.distill.temperature,
        loss_weights: cfg.distill.mode.weights(cfg.distill.alpha),
        dtd_reference: dtd_reference(&teacher.0, &student).into(),
        seeds,
        mean_accuracy,
        std_accuracy,
        config: cfg.clone(),
    };
    create_dir(&cfg.output)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&cfg.output.join("summary.json"), &json)?;
    Ok(summary)
}

/// Full pipeline. Trains the teacher into the output root unless a teacher
/// checkpoint path is given.
pub fn run_all(cfg: &ExperimentConfig, teacher: Option<&Path>) -> Result<Summary> {
    let splits = load_splits(cfg)?;
    let teacher_path = match teacher {
        Some(p) => p.to_path_buf(),
        None => train_teacher(cfg, &splits, &cfg.output)?.path,
    };
    run_prune(cfg, &splits, &teacher_path)?;
    run_distill(cfg, &splits, &teacher_path)
}
