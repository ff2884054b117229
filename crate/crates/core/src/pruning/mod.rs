//! One-shot pruning at initialization.
//!
//! A criterion produces a nonnegative [`ScoreVector`] over every parameter;
//! [`make_mask`] keeps the highest-scoring `1 − 𝒫` fraction of the prunable
//! weights. Biases and the final classifier are never pruned. In channel mode
//! scores are summed per output channel and whole channels are kept or
//! removed under one global ratio.

mod scores;

pub use scores::{
    diag_method, feature_loss, grad_flow, grasp_rank, grasp_raw, grasp_raw_scores, saliency_lnpt, saliency_snip,
    score_grasp, score_lnpt, score_magnitude, score_random, score_snip, score_synflow, LnptHessian, ScoreContext,
    ScoreLoss,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ScoreSampling;
use crate::model::{ModelError, ModelSpec, ParamInfo, Parameters};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("pruning ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("non-finite {context} in {layer}")]
    NonFinite { layer: String, context: String },
    #[error("score vector has {got} entries, parameters have {expected}")]
    Length { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, PruneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Lnpt,
    Snip,
    Grasp,
    Synflow,
    Magnitude,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Lnpt,
        Criterion::Snip,
        Criterion::Grasp,
        Criterion::Synflow,
        Criterion::Magnitude,
        Criterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Lnpt => "lnpt",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::Synflow => "synflow",
            Criterion::Magnitude => "magnitude",
            Criterion::Random => "random",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown criterion `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    #[default]
    Unstructured,
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub ratio: f64,
    pub mode: PruneMode,
    /// Scoring samples drawn per class.
    pub score_per_class: usize,
    /// Hutchinson probes for the LNPT Hessian diagonal.
    pub hessian_samples: usize,
    pub lnpt_hessian: LnptHessian,
    /// Loss used by SNIP and GraSP.
    pub baseline_loss: ScoreLoss,
    /// Give the cross-entropy baseline loss the true labels instead of
    /// teacher pseudo-labels.
    pub labeled_baseline: bool,
    pub score_sampling: ScoreSampling,
    /// Set per run from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            criterion: Criterion::Lnpt,
            ratio: 0.9,
            mode: PruneMode::Unstructured,
            score_per_class: 10,
            hessian_samples: crate::tensor::hessian::DEFAULT_PROBES,
            lnpt_hessian: LnptHessian::Diag,
            baseline_loss: ScoreLoss::Feature,
            labeled_baseline: false,
            score_sampling: ScoreSampling::BalancedPseudo,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if self.hessian_samples == 0 {
            return Err(PruneError::Invalid("hessian_samples must be at least 1".into()));
        }
        if self.score_per_class == 0 {
            return Err(PruneError::Invalid("score_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(PruneError::Ratio(ratio))
    }
}

/// Per-parameter saliency, finite and nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(PruneError::Invalid(format!("score {i} is {} (must be finite and >= 0)", scores[i])));
        }
        Ok(ScoreVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Computes the configured criterion's scores for a student at init.
pub fn score(cfg: &PruneConfig, ctx: &ScoreContext<'_>) -> Result<ScoreVector> {
    match cfg.criterion {
        Criterion::Lnpt => score_lnpt(ctx, cfg.hessian_samples, cfg.lnpt_hessian, cfg.seed),
        Criterion::Snip => score_snip(ctx, cfg.baseline_loss),
        Criterion::Grasp => score_grasp(ctx, cfg.baseline_loss),
        Criterion::Synflow => score_synflow(ctx.spec, ctx.params),
        Criterion::Magnitude => score_magnitude(ctx.params),
        Criterion::Random => Ok(score_random(ctx.params.len(), cfg.seed)),
    }
}

/// Number of entries kept out of `total` at ratio `𝒫`.
pub fn kept_for(total: usize, ratio: f64) -> usize {
    total - (ratio * total as f64).round() as usize
}

/// Keep flags for the top `total − round(𝒫·total)` scores. Ties keep the
/// lower index first.
pub fn select_top(scores: &[f64], ratio: f64) -> Result<Vec<bool>> {
    check_ratio(ratio)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(PruneError::Invalid(format!("score {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; scores.len()];
    for &i in &order[..kept_for(scores.len(), ratio)] {
        keep[i] = true;
    }
    Ok(keep)
}

/// Binary keep mask aligned with the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    keep: Vec<bool>,
    /// Kept prunable weights.
    pub kept_count: usize,
    /// All prunable weights.
    pub total_count: usize,
}

/// Kept/total of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerDensity {
    pub name: String,
    pub kept: usize,
    pub total: usize,
    pub prunable: bool,
}

impl PruneMask {
    /// Mask keeping everything.
    pub fn dense(layout: &[ParamInfo]) -> Self {
        let len = layout.iter().map(|p| p.len).sum();
        Self::from_flat(layout, vec![true; len]).expect("consistent layout")
    }

    /// Rebuilds counts from raw keep flags; non-prunable entries must be kept.
    pub fn from_flat(layout: &[ParamInfo], keep: Vec<bool>) -> Result<Self> {
        let len: usize = layout.iter().map(|p| p.len).sum();
        if keep.len() != len {
            return Err(PruneError::Length {
                expected: len,
                got: keep.len(),
            });
        }
        let mut kept_count = 0;
        let mut total_count = 0;
        for p in layout {
            let bits = &keep[p.range()];
            if p.prunable() {
                total_count += p.len;
                kept_count += bits.iter().filter(|b| **b).count();
            } else if bits.iter().any(|b| !b) {
                return Err(PruneError::Invalid(format!("{} is never pruned", p.name)));
            }
        }
        Ok(PruneMask {
            keep,
            kept_count,
            total_count,
        })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    /// Fraction of prunable weights kept.
    pub fn density(&self) -> f64 {
        if self.total_count == 0 {
            1.0
        } else {
            self.kept_count as f64 / self.total_count as f64
        }
    }

    /// Per-tensor slices, in layout order.
    pub fn per_tensor(&self, layout: &[ParamInfo]) -> Vec<Vec<bool>> {
        layout.iter().map(|p| self.keep[p.range()].to_vec()).collect()
    }

    pub fn layer_density(&self, layout: &[ParamInfo]) -> Vec<LayerDensity> {
        layout
            .iter()
            .map(|p| LayerDensity {
                name: p.name.clone(),
                kept: self.keep[p.range()].iter().filter(|b| **b).count(),
                total: p.len,
                prunable: p.prunable(),
            })
            .collect()
    }

    /// Sets masked parameters to exactly zero.
    pub fn apply(&self, params: &mut Parameters) {
        for (v, k) in params.flat_mut().iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }

    /// Gradient hook: zeroes gradient entries of masked parameters.
    pub fn zero_masked(&self, grad: &mut [f64]) {
        for (g, k) in grad.iter_mut().zip(&self.keep) {
            if !k {
                *g = 0.0;
            }
        }
    }

    /// Number of masked parameters that are nonzero (0 when the mask holds).
    pub fn violations(&self, params: &Parameters) -> usize {
        params
            .flat()
            .iter()
            .zip(&self.keep)
            .filter(|(v, k)| !**k && **v != 0.0)
            .count()
    }

    /// FNV-1a digest of the keep bits, for cheap equality reports.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in &self.keep {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Global unstructured mask over prunable weights.
pub fn make_mask(scores: &ScoreVector, layout: &[ParamInfo], ratio: f64) -> Result<PruneMask> {
    let len: usize = layout.iter().map(|p| p.len).sum();
    if scores.len() != len {
        return Err(PruneError::Length {
            expected: len,
            got: scores.len(),
        });
    }
    check_ratio(ratio)?;
    let mut keep = vec![true; len];
    let positions: Vec<usize> = layout.iter().filter(|p| p.prunable()).flat_map(|p| p.range()).collect();
    let candidate: Vec<f64> = positions.iter().map(|&i| scores.as_slice()[i]).collect();
    for (&i, k) in positions.iter().zip(select_top(&candidate, ratio)?) {
        keep[i] = k;
    }
    PruneMask::from_flat(layout, keep)
}

/// Sums of scores over each row of a `channels x rest` block.
pub fn channel_sums(scores: &[f64], channels: usize) -> Vec<f64> {
    if channels == 0 {
        return Vec::new();
    }
    scores.chunks(scores.len() / channels).map(|c| c.iter().sum()).collect()
}

/// Output-channel score of one prunable weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScore {
    /// Index into the parameter layout.
    pub tensor: usize,
    pub channel: usize,
    pub score: f64,
}

/// Per-output-channel sums over every prunable weight tensor, in layout order.
pub fn channel_scores(scores: &ScoreVector, layout: &[ParamInfo]) -> Vec<ChannelScore> {
    let mut out = Vec::new();
    for (t, p) in layout.iter().enumerate().filter(|(_, p)| p.prunable()) {
        for (channel, score) in channel_sums(&scores.as_slice()[p.range()], p.channels())
            .into_iter()
            .enumerate()
        {
            out.push(ChannelScore { tensor: t, channel, score });
        }
    }
    out
}

/// Structured mask: one global ratio over all output channels of prunable
/// weights. Biases of removed channels stay (biases are never pruned).
pub fn make_channel_mask(scores: &ScoreVector, layout: &[ParamInfo], ratio: f64) -> Result<PruneMask> {
    let len: usize = layout.iter().map(|p| p.len).sum();
    if scores.len() != len {
        return Err(PruneError::Length {
            expected: len,
            got: scores.len(),
        });
    }
    let channels = channel_scores(scores, layout);
    let sums: Vec<f64> = channels.iter().map(|c| c.score).collect();
    let chosen = select_top(&sums, ratio)?;
    let mut keep = vec![true; len];
    for (c, k) in channels.iter().zip(chosen) {
        if !k {
            let p = &layout[c.tensor];
            let row = p.len / p.channels();
            let start = p.offset + c.channel * row;
            keep[start..start + row].iter_mut().for_each(|b| *b = false);
        }
    }
    PruneMask::from_flat(layout, keep)
}

/// Scores and masks a student in one call.
pub fn prune(cfg: &PruneConfig, ctx: &ScoreContext<'_>) -> Result<(ScoreVector, PruneMask)> {
    cfg.validate()?;
    let scores = score(cfg, ctx)?;
    let layout = ctx.params.layout();
    let mask = match cfg.mode {
        PruneMode::Unstructured => make_mask(&scores, layout, cfg.ratio)?,
        PruneMode::Channel => make_channel_mask(&scores, layout, cfg.ratio)?,
    };
    Ok((scores, mask))
}

/// Masked copy of the parameters.
pub fn apply_mask(params: &Parameters, mask: &PruneMask) -> Parameters {
    let mut out = params.clone();
    mask.apply(&mut out);
    out
}

/// Every layer's prunable flag, for specs where callers only hold a spec.
pub fn prunable_count(spec: &ModelSpec) -> usize {
    Parameters::zeros(spec)
        .layout()
        .iter()
        .filter(|p| p.prunable())
        .map(|p| p.len)
        .sum()
}
