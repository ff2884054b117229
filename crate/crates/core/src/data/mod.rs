//! Datasets: IDX and CSV ingestion, synthetic generators, preprocessing and
//! scoring-batch selection.
//!
//! Labels are optional on [`Dataset`]. Label-free consumers receive an
//! [`Inputs`] view, which has no way to reach the label column.

mod idx;
mod sampling;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use sampling::{score_batch, ScoreSampling};
pub use synth::{blob_centers, synth_blobs, synth_spirals};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::InputShape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Score,
}

/// Row-major `N x D` inputs with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    shape: InputShape,
    labels: Option<Vec<usize>>,
    classes: usize,
    split: Split,
}

/// Label-free view of a dataset's inputs.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Inputs<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        Inputs { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn all(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.data.to_vec()).expect("consistent view")
    }

    /// Stacks the selected rows into a `[indices.len(), D]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.dim, out).expect("consistent view")
    }
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        shape: InputShape,
        labels: Option<Vec<usize>>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let dim = shape.width();
        if dim == 0 || inputs.len() % dim != 0 {
            return Err(DataError::Invalid(format!(
                "{} values cannot form rows of width {dim}",
                inputs.len()
            )));
        }
        let n = inputs.len() / dim;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(DataError::CountMismatch {
                    images: n,
                    labels: labels.len(),
                });
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(DataError::LabelRange { label, classes });
            }
        }
        Ok(Dataset {
            inputs,
            shape,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shape.width()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn raw_inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn unlabeled(&self) -> Inputs<'_> {
        Inputs::new(&self.inputs, self.dim())
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Replaces the labels (used by tests that corrupt the label column).
    pub fn with_labels(self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(self.inputs, self.shape, Some(labels), self.classes, self.split)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let dim = self.dim();
        let mut inputs = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            inputs.extend_from_slice(&self.inputs[i * dim..(i + 1) * dim]);
        }
        Dataset {
            inputs,
            shape: self.shape,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            split,
        }
    }

    /// Seeded disjoint split into `(train, test)`.
    pub fn split_train_test(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let idx = split_indices(self.len(), test_fraction, seed)?;
        Ok((self.subset(&idx.train, Split::Train), self.subset(&idx.test, Split::Test)))
    }

    pub fn standardize(&mut self, s: &Standardizer) -> Result<()> {
        s.apply(&mut self.inputs)
    }
}

/// Disjoint train/test row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Per-feature standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant features get a unit scale.
    pub fn fit(train: &Dataset) -> Self {
        let (n, d) = (train.len(), train.dim());
        let mut mean = vec![0.0; d];
        for row in train.inputs.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for row in train.inputs.chunks(d) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, inputs: &mut [f64]) -> Result<()> {
        let d = self.mean.len();
        if d == 0 || inputs.len() % d != 0 {
            return Err(DataError::Invalid("standardizer width does not match inputs".into()));
        }
        for row in inputs.chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }

    pub fn invert(&self, inputs: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let mut out = inputs.to_vec();
        for row in out.chunks_mut(d) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
        out
    }
}

/// Reads a CSV with a header row. A column named `label` (optional) holds
/// integer class ids; every other column is a numeric feature.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(file, classes)
}

pub fn parse_csv<R: std::io::Read>(reader: R, classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let dim = headers.len() - usize::from(label_col.is_some());
    if dim == 0 {
        return Err(DataError::Csv("no feature columns".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if Some(j) == label_col {
                let l = field
                    .parse::<usize>()
                    .map_err(|_| DataError::Csv(format!("row {}: bad label `{field}`", line + 1)))?;
                labels.push(l);
            } else {
                let v = field
                    .parse::<f64>()
                    .map_err(|_| DataError::Csv(format!("row {}: bad number `{field}`", line + 1)))?;
                inputs.push(v);
            }
        }
    }
    let labels = label_col.map(|_| labels);
    let k = match (classes, &labels) {
        (Some(k), _) => k,
        (None, Some(l)) => l.iter().max().map_or(0, |m| m + 1),
        (None, None) => 0,
    };
    Dataset::new(inputs, InputShape::Flat { dim }, labels, k, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_is_disjoint_and_covering() {
        let s = split_indices(101, 0.2, 7).unwrap();
        assert_eq!(s.test.len(), 20);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(s.train.iter().all(|i| !s.test.contains(i)));
        assert_eq!(s, split_indices(101, 0.2, 7).unwrap());
    }

    #[test]
    fn csv_with_and_without_labels() {
        let ds = parse_csv("a,label,b\n1.0,2,3\n-1,0,0.5\n".as_bytes(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), Some(&[2usize, 0][..]));
        assert_eq!(ds.classes(), 3);
        assert_eq!(ds.raw_inputs(), &[1.0, 3.0, -1.0, 0.5]);
        let ds = parse_csv("x,y\n1,2\n".as_bytes(), Some(2)).unwrap();
        assert!(ds.labels().is_none());
        assert!(parse_csv("x,label\n1,zz\n".as_bytes(), None).is_err());
        assert!(parse_csv("x,label\n1,5\n".as_bytes(), Some(2)).is_err());
    }

    #[test]
    fn labels_are_range_checked() {
        let r = Dataset::new(vec![0.0; 4], InputShape::Flat { dim: 2 }, Some(vec![0, 3]), 3, Split::Train);
        assert!(matches!(r, Err(DataError::LabelRange { label: 3, classes: 3 })));
    }

    #[test]
    fn unlabeled_view_batches_rows() {
        let ds = Dataset::new(vec![1., 2., 3., 4., 5., 6.], InputShape::Flat { dim: 2 }, None, 2, Split::Train).unwrap();
        let b = ds.unlabeled().batch(&[2, 0]);
        assert_eq!(b.data(), &[5., 6., 1., 2.]);
    }

    proptest! {
        #[test]
        fn standardize_round_trips(rows in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 3), 2..20)) {
            let flat: Vec<f64> = rows.concat();
            let mut ds = Dataset::new(flat.clone(), InputShape::Flat { dim: 3 }, None, 1, Split::Train).unwrap();
            let s = Standardizer::fit(&ds);
            ds.standardize(&s).unwrap();
            let back = s.invert(ds.raw_inputs());
            for (a, b) in back.iter().zip(&flat) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }
    }
}
