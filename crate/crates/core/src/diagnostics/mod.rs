//! Generalization instrumentation: teacher–student weight distance,
//! feature-gap traces, the first-order learning-gap step, and the empirical
//! NTK with its feature-level sensitivity `s = W⁺ Θ̄ W⁺ᵀ`.
//!
//! Jacobians are assembled from one vector–Jacobian product per output
//! entry, so everything here is sized for small nets.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::model::{forward, forward_tape, ClassifierView, ModelError, ModelSpec, Parameters};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("{what} needs {needed} Jacobian entries, limit is {limit}; use a smaller preset such as mlp-tiny")]
    TooLarge {
        what: &'static str,
        needed: usize,
        limit: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("diagnostics csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Largest `P·M` for which [`learning_gap_step`] builds `J = ∇θ m_s`.
pub const MAX_JACOBIAN_ENTRIES: usize = 1_000_000;
/// Largest `N·K` for [`ntk`].
pub const MAX_NTK_ROWS: usize = 256;

/// `dᵀd` with `d = θ_t − θ_s`, counting masked student entries as zero.
pub fn weight_distance(theta_t: &[f64], theta_s: &[f64], keep: Option<&[bool]>) -> Result<f64> {
    if theta_t.len() != theta_s.len() || keep.is_some_and(|k| k.len() != theta_t.len()) {
        return Err(DiagError::Invalid(
            "weight distance needs equal-length parameter vectors (identical architectures)".into(),
        ));
    }
    Ok(theta_t
        .iter()
        .zip(theta_s)
        .enumerate()
        .map(|(i, (t, s))| {
            let s = if keep.is_none_or(|k| k[i]) { *s } else { 0.0 };
            (t - s) * (t - s)
        })
        .sum())
}

/// Mean over samples of `‖m_t − m_s‖²`.
pub fn mean_feature_gap(spec: &ModelSpec, params: &Parameters, inputs: &Tensor, teacher_features: &Tensor) -> Result<f64> {
    let out = forward(spec, params, inputs)?;
    let n = inputs.shape()[0];
    let total = crate::pruning::feature_loss(teacher_features, &out.features).map_err(|e| match e {
        crate::pruning::PruneError::Tensor(t) => DiagError::Tensor(t),
        other => DiagError::Invalid(other.to_string()),
    })?;
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Feature-gap trace over a sequence of parameter snapshots.
pub fn feature_loss_trace(
    spec: &ModelSpec,
    snapshots: &[Parameters],
    inputs: &Tensor,
    teacher_features: &Tensor,
) -> Result<Vec<f64>> {
    snapshots
        .iter()
        .map(|p| mean_feature_gap(spec, p, inputs, teacher_features))
        .collect()
}

/// Rows `∂(Σ_n c[n]·y[n]) / ∂θ` for each cotangent, as a dense matrix.
fn jacobian_rows(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    use_features: bool,
    cotangents: impl Iterator<Item = Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let x = tape.constant(batch.clone());
    let out = forward_tape(spec, &mut tape, &pv, x)?;
    let y = if use_features { out.features } else { out.logits };
    cotangents
        .map(|c| Ok(pv.flat_from(&tape.vjp(y, &c)?)))
        .collect()
}

/// Predicted and measured one-step change of the learning gap.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningGap {
    /// `η·J·g`.
    pub predicted: Vec<f64>,
    /// `m̄_s(θ) − m̄_s(θ − ηg)`.
    pub measured: Vec<f64>,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl LearningGap {
    pub fn predicted_norm(&self) -> f64 {
        norm(self.predicted.iter().copied())
    }

    pub fn measured_norm(&self) -> f64 {
        norm(self.measured.iter().copied())
    }

    pub fn abs_error(&self) -> f64 {
        norm(self.predicted.iter().zip(&self.measured).map(|(p, m)| p - m))
    }

    /// `‖pred − meas‖ / ‖meas‖` (0 when both vanish).
    pub fn rel_error(&self) -> f64 {
        let e = self.abs_error();
        if e == 0.0 {
            0.0
        } else {
            e / self.measured_norm()
        }
    }
}

/// One SGD step of size `η` on the sum-form feature loss, with the change
/// of the batch-mean feature map `m̄_s ∈ R^M` predicted to first order and
/// measured on a scratch copy. Masked gradient entries are zeroed.
pub fn learning_gap_step(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    teacher_features: &Tensor,
    eta: f64,
    keep: Option<&[bool]>,
) -> Result<LearningGap> {
    let m = spec.feature_dim();
    let p = params.len();
    if p.saturating_mul(m) > MAX_JACOBIAN_ENTRIES {
        return Err(DiagError::TooLarge {
            what: "learning-gap Jacobian",
            needed: p.saturating_mul(m),
            limit: MAX_JACOBIAN_ENTRIES,
        });
    }
    let n = batch.shape()[0];
    if n == 0 {
        return Err(DiagError::Invalid("empty batch".into()));
    }
    let mut grad = {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, true);
        let x = tape.constant(batch.clone());
        let out = forward_tape(spec, &mut tape, &pv, x)?;
        let mt = tape.constant(teacher_features.clone());
        let diff = tape.sub(mt, out.features)?;
        let loss = tape.sum_sq(diff)?;
        tape.backward(loss)?;
        pv.flat_grad(&tape)
    };
    if let Some(k) = keep {
        grad.iter_mut().zip(k).filter(|(_, k)| !**k).for_each(|(g, _)| *g = 0.0);
    }
    let inv = 1.0 / n as f64;
    let cotangents = (0..m).map(|j| {
        let mut c = vec![0.0; n * m];
        (0..n).for_each(|r| c[r * m + j] = inv);
        Tensor::matrix(n, m, c).expect("cotangent shape")
    });
    let jac = jacobian_rows(spec, params, batch, true, cotangents)?;
    let predicted = jac
        .iter()
        .map(|row| eta * row.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mean_features = |p: &Parameters| -> Result<Vec<f64>> {
        let f = forward(spec, p, batch)?.features;
        let mut acc = vec![0.0; m];
        for r in 0..n {
            acc.iter_mut().zip(f.row(r)).for_each(|(a, v)| *a += v * inv);
        }
        Ok(acc)
    };
    let stepped: Vec<f64> = params.flat().iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
    let before = mean_features(params)?;
    let after = mean_features(&params.with_flat(stepped)?)?;
    let measured = before.iter().zip(&after).map(|(b, a)| b - a).collect();
    Ok(LearningGap { predicted, measured })
}

/// Empirical NTK over all `N·K` logits, rows ordered sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkMatrix {
    pub samples: usize,
    pub classes: usize,
    pub theta: DMatrix<f64>,
}

impl NtkMatrix {
    pub fn asymmetry(&self) -> f64 {
        (&self.theta - self.theta.transpose()).abs().max()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    pub fn norm(&self) -> f64 {
        self.theta.norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.theta + self.theta.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    /// `K x K` block between samples `i` and `j`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let k = self.classes;
        self.theta.view((i * k, j * k), (k, k)).into_owned()
    }

    /// Mean of all `N²` sample-pair blocks.
    pub fn mean_block(&self) -> DMatrix<f64> {
        let k = self.classes;
        let mut acc = DMatrix::zeros(k, k);
        for i in 0..self.samples {
            for j in 0..self.samples {
                acc += self.block(i, j);
            }
        }
        acc / (self.samples * self.samples).max(1) as f64
    }
}

/// `Θ = J Jᵀ` with `J = ∂f(X)/∂θ`. `active` restricts θ to the flagged
/// entries (e.g. unpruned weights).
pub fn ntk(spec: &ModelSpec, params: &Parameters, batch: &Tensor, active: Option<&[bool]>) -> Result<NtkMatrix> {
    let n = batch.shape()[0];
    let k = spec.classes;
    if n * k > MAX_NTK_ROWS {
        return Err(DiagError::TooLarge {
            what: "NTK",
            needed: n * k,
            limit: MAX_NTK_ROWS,
        });
    }
    let cotangents = (0..n * k).map(|r| {
        let mut c = vec![0.0; n * k];
        c[r] = 1.0;
        Tensor::matrix(n, k, c).expect("cotangent shape")
    });
    let mut rows = jacobian_rows(spec, params, batch, false, cotangents)?;
    if let Some(a) = active {
        for row in &mut rows {
            row.iter_mut().zip(a).filter(|(_, a)| !**a).for_each(|(v, _)| *v = 0.0);
        }
    }
    let p = params.len();
    let j = DMatrix::from_fn(n * k, p, |r, c| rows[r][c]);
    Ok(NtkMatrix {
        samples: n,
        classes: k,
        theta: &j * j.transpose(),
    })
}

/// `s = W⁺ Θ̄ W⁺ᵀ` (`M x M`) from the mean sample-pair NTK block.
pub fn sensitivity(classifier: &ClassifierView, ntk: &NtkMatrix) -> Result<DMatrix<f64>> {
    if ntk.classes != classifier.classes {
        return Err(DiagError::Invalid(format!(
            "NTK has {} classes, classifier has {}",
            ntk.classes, classifier.classes
        )));
    }
    let pinv = classifier.pseudoinverse();
    Ok(&pinv * ntk.mean_block() * pinv.transpose())
}

/// `‖s_t − s_0‖_F / ‖s_0‖_F`.
pub fn s_drift(s_t: &DMatrix<f64>, s_0: &DMatrix<f64>) -> f64 {
    let diff = (s_t - s_0).norm();
    let base = s_0.norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / base
    }
}

/// One row of the per-run diagnostics CSV. Epoch 0 is the pruned
/// initialization. `delta_ell_*` are norms of the predicted and measured
/// learning-gap steps; empty when the net is too large.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub epoch: usize,
    pub dtd: f64,
    pub mean_lm: f64,
    pub delta_ell_pred: Option<f64>,
    pub delta_ell_meas: Option<f64>,
    pub s_drift: Option<f64>,
}

pub const DIAGNOSTICS_HEADER: [&str; 6] = ["epoch", "dtd", "mean_Lm", "delta_ell_pred", "delta_ell_meas", "s_drift"];

fn io_err(path: &Path, source: std::io::Error) -> DiagError {
    DiagError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticsRow]) -> Result<()> {
    let csv_err = |e: csv::Error| DiagError::Csv(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(DIAGNOSTICS_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(crate::sig6).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            crate::sig6(r.dtd),
            crate::sig6(r.mean_lm),
            opt(r.delta_ell_pred),
            opt(r.delta_ell_meas),
            opt(r.s_drift),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRow>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| DiagError::Csv(e.to_string()))?;
    if header.iter().ne(DIAGNOSTICS_HEADER) {
        return Err(DiagError::Csv(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DiagError::Csv(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| DiagError::Csv(format!("bad number `{}`", &rec[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push(DiagnosticsRow {
            epoch: rec[0].parse().map_err(|_| DiagError::Csv(format!("bad epoch `{}`", &rec[0])))?,
            dtd: num(1)?,
            mean_lm: num(2)?,
            delta_ell_pred: opt(3)?,
            delta_ell_meas: opt(4)?,
            s_drift: opt(5)?,
        });
    }
    Ok(out)
}
