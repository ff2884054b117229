use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_feature_kd, one_hot, pseudo_onehot, soft_targets};
use super::{DistillConfig, DistillError, DistillMode, Result, RunRecord};
use crate::data::{Dataset, Inputs};
use crate::model::{forward, forward_tape, ForwardOutput, ModelSpec, Parameters};
use crate::pruning::PruneMask;
use crate::tensor::{argmax, Tape, Tensor, Var};

/// Training rows for one run. Labels are only carried for modes that read them.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub inputs: Inputs<'a>,
    labels: Option<&'a [usize]>,
    /// Frozen teacher outputs, row-aligned with `inputs`.
    pub teacher: Option<&'a ForwardOutput>,
}

impl<'a> TrainData<'a> {
    pub fn label_free(inputs: Inputs<'a>, teacher: &'a ForwardOutput) -> Self {
        TrainData {
            inputs,
            labels: None,
            teacher: Some(teacher),
        }
    }

    pub fn labeled(inputs: Inputs<'a>, labels: &'a [usize], teacher: Option<&'a ForwardOutput>) -> Self {
        TrainData {
            inputs,
            labels: Some(labels),
            teacher,
        }
    }

    /// Hands the trainer the dataset's labels only if `mode` needs them.
    pub fn for_mode(ds: &'a Dataset, mode: DistillMode, teacher: Option<&'a ForwardOutput>) -> Self {
        TrainData {
            inputs: ds.unlabeled(),
            labels: if mode.needs_labels() { ds.labels() } else { None },
            teacher,
        }
    }
}

/// Held-out metrics reported by the epoch observer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub test_accuracy: f64,
    pub dtd: f64,
    pub mean_lm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub records: Vec<RunRecord>,
}

/// `η(e) = η_min + ½(η₀ − η_min)(1 + cos(πe/N))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr: f64, lr_min: f64) -> f64 {
    if epochs == 0 {
        return lr;
    }
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.numel() / t.shape()[0].max(1);
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::matrix(idx.len(), cols, out).expect("row gather")
}

/// Targets shared by every step of a run.
struct Targets {
    hard: Tensor,
    second: Option<Tensor>,
}

fn targets(data: &TrainData<'_>, cfg: &DistillConfig, classes: usize) -> Result<Targets> {
    let mode = cfg.mode;
    if mode.needs_teacher() && data.teacher.is_none() {
        return Err(DistillError::Missing(mode.name(), "teacher outputs"));
    }
    let hard = if mode.needs_labels() {
        let labels = data.labels.ok_or(DistillError::Missing(mode.name(), "labels"))?;
        one_hot(labels, classes)?
    } else {
        pseudo_onehot(&data.teacher.expect("checked").logits)?
    };
    let second = match (mode, data.teacher) {
        (DistillMode::ClassicalKd, Some(t)) => Some(soft_targets(&t.logits, cfg.temperature)?),
        (_, Some(t)) => Some(t.features.clone()),
        (_, None) => None,
    };
    Ok(Targets { hard, second })
}

/// Records both loss terms for the rows `idx`; returns `(L_oh, L_m)`.
fn record_losses(
    tape: &mut Tape,
    out_logits: Var,
    out_features: Var,
    tg: &Targets,
    idx: &[usize],
    cfg: &DistillConfig,
) -> Result<(Var, Var)> {
    let hard = tape.constant(gather(&tg.hard, idx));
    let oh = tape.cross_entropy(out_logits, hard)?;
    let m = match &tg.second {
        Some(second) => {
            let s = tape.constant(gather(second, idx));
            if cfg.mode == DistillMode::ClassicalKd {
                tape.cross_entropy(out_logits, s)?
            } else {
                loss_feature_kd(tape, s, out_features, cfg.temperature, cfg.symmetric_temp)?
            }
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((oh, m))
}

/// Full-set means of `(L_oh, L_m)` at the given parameters.
pub fn evaluate_components(
    spec: &ModelSpec,
    params: &Parameters,
    data: &TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(f64, f64)> {
    let tg = targets(data, cfg, spec.classes)?;
    let idx: Vec<usize> = (0..data.inputs.len()).collect();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let x = tape.constant(data.inputs.all());
    let out = forward_tape(spec, &mut tape, &pv, x)?;
    let (oh, m) = record_losses(&mut tape, out.logits, out.features, &tg, &idx, cfg)?;
    Ok((tape.value(oh).item()?, tape.value(m).item()?))
}

/// Masked SGD with momentum, L2 decay and a per-epoch cosine schedule.
/// `observer` runs after every epoch on the current parameters.
pub fn train(
    spec: &ModelSpec,
    mut params: Parameters,
    mask: &PruneMask,
    data: &TrainData<'_>,
    cfg: &DistillConfig,
    observer: &mut dyn FnMut(usize, &Parameters) -> Result<EpochMetrics>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if mask.keep().len() != params.len() {
        return Err(DistillError::Config("mask does not match parameters".into()));
    }
    let n = data.inputs.len();
    if n == 0 {
        return Err(DistillError::Config("empty training set".into()));
    }
    let tg = targets(data, cfg, spec.classes)?;
    let (w_oh, w_m) = cfg.mode.weights(cfg.alpha);
    mask.apply(&mut params);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; params.len()];
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min);
        order.shuffle(&mut rng);
        let (mut sum_oh, mut sum_m) = (0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, true);
            let x = tape.constant(data.inputs.batch(idx));
            let out = forward_tape(spec, &mut tape, &pv, x)?;
            let (oh, m) = record_losses(&mut tape, out.logits, out.features, &tg, idx, cfg)?;
            let a = tape.scale(oh, w_oh)?;
            let b = tape.scale(m, w_m)?;
            let total = tape.add(a, b)?;
            let (v_oh, v_m, v_total) = (
                tape.value(oh).item()?,
                tape.value(m).item()?,
                tape.value(total).item()?,
            );
            if !(v_total.is_finite() && v_oh.is_finite() && v_m.is_finite()) {
                return Err(DistillError::NonFinite {
                    epoch: epoch + 1,
                    step: step + 1,
                    what: "loss".into(),
                });
            }
            tape.backward(total)?;
            let mut grad = pv.flat_grad(&tape);
            mask.zero_masked(&mut grad);
            let theta = params.flat_mut();
            for i in 0..theta.len() {
                let g = if mask.is_kept(i) {
                    grad[i] + cfg.weight_decay * theta[i]
                } else {
                    0.0
                };
                velocity[i] = cfg.momentum * velocity[i] + g;
                theta[i] -= lr * velocity[i];
            }
            let rows = idx.len() as f64;
            sum_oh += v_oh * rows;
            sum_m += v_m * rows;
        }
        if let Some(i) = params.flat().iter().position(|v| !v.is_finite()) {
            return Err(DistillError::NonFinite {
                epoch: epoch + 1,
                step: n.div_ceil(cfg.batch_size),
                what: format!("parameter {i}"),
            });
        }
        let metrics = observer(epoch + 1, &params)?;
        let (loss_oh, loss_m) = (sum_oh / n as f64, sum_m / n as f64);
        records.push(RunRecord {
            epoch: epoch + 1,
            loss_oh,
            loss_m,
            loss_total: w_oh * loss_oh + w_m * loss_m,
            test_accuracy: metrics.test_accuracy,
            dtd: metrics.dtd,
            mean_lm: metrics.mean_lm,
            lr,
        });
    }
    Ok(TrainOutcome { params, records })
}

/// Top-1 accuracy in percent.
pub fn accuracy(spec: &ModelSpec, params: &Parameters, inputs: Inputs<'_>, labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let out = forward(spec, params, &inputs.all())?;
    let correct = (0..inputs.len())
        .filter(|&i| argmax(out.logits.row(i)) == labels[i])
        .count();
    Ok(100.0 * correct as f64 / inputs.len() as f64)
}

pub const RECORD_HEADER: [&str; 8] = [
    "epoch",
    "loss_oh",
    "loss_m",
    "loss_total",
    "test_accuracy",
    "dtd",
    "mean_lm",
    "lr",
];

fn io_err(path: &Path, source: std::io::Error) -> DistillError {
    DistillError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DistillError::Csv(e.to_string()))?;
    w.write_record(RECORD_HEADER).map_err(|e| DistillError::Csv(e.to_string()))?;
    for r in records {
        let f = crate::sig6;
        w.write_record([
            r.epoch.to_string(),
            f(r.loss_oh),
            f(r.loss_m),
            f(r.loss_total),
            f(r.test_accuracy),
            f(r.dtd),
            f(r.mean_lm),
            f(r.lr),
        ])
        .map_err(|e| DistillError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| DistillError::Csv(e.to_string()))?;
    if header.iter().ne(RECORD_HEADER) {
        return Err(DistillError::Csv(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DistillError::Csv(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| DistillError::Csv(format!("bad number `{}`", &rec[i])))
        };
        out.push(RunRecord {
            epoch: rec[0].parse().map_err(|_| DistillError::Csv(format!("bad epoch `{}`", &rec[0])))?,
            loss_oh: num(1)?,
            loss_m: num(2)?,
            loss_total: num(3)?,
            test_accuracy: num(4)?,
            dtd: num(5)?,
            mean_lm: num(6)?,
            lr: num(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, Split};
    use crate::model::{init, preset, InputShape, Layer};
    use crate::pruning::{make_mask, score_random};

    fn none(_: usize, _: &Parameters) -> Result<EpochMetrics> {
        Ok(EpochMetrics::default())
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1, 0.0), 0.1);
        assert!(cosine_lr(10, 10, 0.1, 0.001) - 0.001 < 1e-15);
        assert!((cosine_lr(5, 10, 0.1, 0.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_update() {
        // m_s = w·x feeding a 1x1 classifier; fm_only with α = 1, T = 1,
        // no decay, no momentum, one sample, one epoch.
        let spec = ModelSpec::new(
            "lin",
            InputShape::Flat { dim: 1 },
            vec![
                Layer::Dense { inputs: 1, outputs: 1 },
                Layer::Dense { inputs: 1, outputs: 1 },
            ],
            1,
        )
        .unwrap();
        let params = Parameters::zeros(&spec).with_flat(vec![1.0, 0.0, 0.5, 0.0]).unwrap();
        let ds = Dataset::new(vec![2.0], InputShape::Flat { dim: 1 }, None, 1, Split::Train).unwrap();
        let teacher = ForwardOutput {
            logits: Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            features: Tensor::matrix(1, 1, vec![3.0]).unwrap(),
        };
        let cfg = DistillConfig {
            alpha: 1.0,
            temperature: 1.0,
            epochs: 1,
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            mode: DistillMode::FmOnly,
            ..DistillConfig::default()
        };
        let mask = PruneMask::dense(params.layout());
        let out = train(&spec, params, &mask, &TrainData::label_free(ds.unlabeled(), &teacher), &cfg, &mut none).unwrap();
        // L = (3 − 2w − b)²: dL/dw = −2·2·(3 − 2) = −4, dL/db = −2.
        let theta = out.params.flat();
        assert!((theta[0] - 1.4).abs() < 1e-12);
        assert!((theta[1] - 0.2).abs() < 1e-12);
        assert_eq!(theta[2], 0.5);
        assert_eq!(out.records[0].loss_m, 1.0);
        assert_eq!(out.records[0].loss_total, 1.0);
    }

    fn setup() -> (ModelSpec, Parameters, Dataset, ForwardOutput) {
        let ds = synth_blobs(3, 30, 4, 1.0, 11).unwrap();
        let spec = preset("mlp-tiny", InputShape::Flat { dim: 4 }, 3).unwrap();
        let teacher = init(&spec, 100);
        let cache = forward(&spec, &teacher, &ds.unlabeled().all()).unwrap();
        (spec.clone(), init(&spec, 1), ds, cache)
    }

    #[test]
    fn mask_is_permanent_and_decomposition_exact() {
        let (spec, params, ds, cache) = setup();
        let mask = make_mask(&score_random(params.len(), 3), params.layout(), 0.8).unwrap();
        let cfg = DistillConfig {
            epochs: 100,
            batch_size: 16,
            alpha: 0.3,
            ..DistillConfig::default()
        };
        let mut check = |_: usize, p: &Parameters| {
            assert_eq!(mask.violations(p), 0);
            Ok(EpochMetrics::default())
        };
        let out = train(&spec, params, &mask, &TrainData::label_free(ds.unlabeled(), &cache), &cfg, &mut check).unwrap();
        assert_eq!(out.records.len(), 100);
        for r in &out.records {
            assert_eq!(r.loss_total, r.loss_oh + 0.3 * r.loss_m);
        }
        let nonzero = out.params.flat().iter().zip(mask.keep()).filter(|(v, k)| !**k && **v != 0.0).count();
        assert_eq!(nonzero, 0);
    }

    #[test]
    fn seeded_runs_repeat_and_ignore_labels() {
        let (spec, params, ds, cache) = setup();
        let mask = PruneMask::dense(params.layout());
        let cfg = DistillConfig {
            epochs: 3,
            batch_size: 8,
            ..DistillConfig::default()
        };
        let garbage: Vec<usize> = (0..ds.len()).map(|i| (i * 5 + 1) % 3).collect();
        let noisy = ds.clone().with_labels(garbage).unwrap();
        let run = |d: &Dataset| {
            train(&spec, params.clone(), &mask, &TrainData::for_mode(d, DistillMode::Lnpt, Some(&cache)), &cfg, &mut none)
                .unwrap()
        };
        let (a, b) = (run(&ds), run(&noisy));
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
        assert_eq!(run(&ds).params, a.params);
    }

    #[test]
    fn modes_need_their_inputs() {
        let (spec, params, ds, cache) = setup();
        let mask = PruneMask::dense(params.layout());
        let cfg = DistillConfig {
            epochs: 1,
            mode: DistillMode::TrueLabel,
            ..DistillConfig::default()
        };
        let unlabeled = TrainData::label_free(ds.unlabeled(), &cache);
        assert!(matches!(
            train(&spec, params.clone(), &mask, &unlabeled, &cfg, &mut none),
            Err(DistillError::Missing(..))
        ));
        let labeled = TrainData::for_mode(&ds, DistillMode::TrueLabel, None);
        assert!(train(&spec, params, &mask, &labeled, &cfg, &mut none).is_ok());
    }

    #[test]
    fn nan_aborts_with_context() {
        let (spec, params, ds, cache) = setup();
        let mut bad = cache.clone();
        bad.features.data_mut()[0] = f64::NAN;
        let mask = PruneMask::dense(params.layout());
        let cfg = DistillConfig {
            epochs: 2,
            batch_size: 200,
            ..DistillConfig::default()
        };
        let err = train(&spec, params, &mask, &TrainData::label_free(ds.unlabeled(), &bad), &cfg, &mut none).unwrap_err();
        assert!(matches!(err, DistillError::NonFinite { epoch: 1, step: 1, .. }), "{err}");
    }

    #[test]
    fn supervised_training_learns_blobs() {
        let (spec, params, ds, _) = setup();
        let mask = PruneMask::dense(params.layout());
        let cfg = DistillConfig {
            epochs: 20,
            batch_size: 16,
            mode: DistillMode::TrueLabel,
            ..DistillConfig::default()
        };
        let out = train(&spec, params, &mask, &TrainData::for_mode(&ds, cfg.mode, None), &cfg, &mut none).unwrap();
        let acc = accuracy(&spec, &out.params, ds.unlabeled(), ds.labels().unwrap()).unwrap();
        assert!(acc > 90.0, "{acc}");
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let recs = vec![RunRecord {
            epoch: 1,
            loss_oh: 1.234567891,
            loss_m: 0.5,
            loss_total: 1.734567891,
            test_accuracy: 97.5,
            dtd: 12.0,
            mean_lm: 0.1,
            lr: 0.1,
        }];
        write_records(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss_oh,loss_m,loss_total,test_accuracy,dtd,mean_lm,lr\n1,1.23457e0,"));
        let back = read_records(&path).unwrap();
        assert_eq!(back[0].epoch, 1);
        assert_eq!(back[0].loss_oh, 1.23457);
    }
}
