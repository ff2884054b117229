use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PruneError, Result, ScoreVector};
use crate::model::{forward_tape, ForwardOutput, InputShape, ModelSpec, Parameters};
use crate::tensor::hessian::{self, DiagMethod, DEFAULT_FD_STEP, EXACT_DIAG_MAX_PARAMS};
use crate::tensor::{argmax, Tape, Tensor, TensorError};

/// Loss whose gradient drives a data-dependent score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreLoss {
    /// `Σ ‖m_t − m_s‖²` against the teacher feature map.
    #[default]
    Feature,
    /// Cross-entropy against labels, or teacher pseudo-labels when none are given.
    CrossEntropy,
}

/// What a data-dependent scorer sees: the student at initialization, the
/// scoring batch, and the frozen teacher's outputs on that batch.
#[derive(Clone, Copy, Debug)]
pub struct ScoreContext<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a Parameters,
    pub batch: &'a Tensor,
    pub teacher: &'a ForwardOutput,
    /// True labels, only for the labeled cross-entropy baseline.
    pub labels: Option<&'a [usize]>,
}

/// `Σ_n ‖m_t[n] − m_s[n]‖²`.
pub fn feature_loss(m_t: &Tensor, m_s: &Tensor) -> Result<f64> {
    if m_t.shape() != m_s.shape() {
        return Err(TensorError::Shape {
            op: "feature_loss",
            shapes: vec![m_t.shape().to_vec(), m_s.shape().to_vec()],
        }
        .into());
    }
    Ok(m_t.data().iter().zip(m_s.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

impl<'a> ScoreContext<'a> {
    fn targets(&self) -> Result<Tensor> {
        let (n, k) = self.teacher.logits.dims2("targets")?;
        let mut t = vec![0.0; n * k];
        for i in 0..n {
            let c = match self.labels {
                Some(l) => l[i],
                None => argmax(self.teacher.logits.row(i)),
            };
            if c >= k {
                return Err(PruneError::Invalid(format!("label {c} out of range for {k} classes")));
            }
            t[i * k + c] = 1.0;
        }
        Ok(Tensor::matrix(n, k, t)?)
    }

    /// Loss and flat gradient at an arbitrary parameter vector.
    pub fn loss_and_grad(&self, theta: &[f64], loss: ScoreLoss) -> Result<(f64, Vec<f64>)> {
        let params = self.params.with_flat(theta.to_vec())?;
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, true);
        let x = tape.constant(self.batch.clone());
        let out = forward_tape(self.spec, &mut tape, &pv, x)?;
        let value = match loss {
            ScoreLoss::Feature => {
                if tape.value(out.features).shape() != self.teacher.features.shape() {
                    return Err(TensorError::Shape {
                        op: "feature_loss",
                        shapes: vec![
                            self.teacher.features.shape().to_vec(),
                            tape.value(out.features).shape().to_vec(),
                        ],
                    }
                    .into());
                }
                let mt = tape.constant(self.teacher.features.clone());
                let diff = tape.sub(mt, out.features)?;
                tape.sum_sq(diff)?
            }
            ScoreLoss::CrossEntropy => {
                let t = tape.constant(self.targets()?);
                tape.cross_entropy(out.logits, t)?
            }
        };
        tape.backward(value)?;
        Ok((tape.value(value).item()?, pv.flat_grad(&tape)))
    }

    fn objective(&self, loss: ScoreLoss) -> impl FnMut(&[f64]) -> crate::tensor::Result<(f64, Vec<f64>)> + '_ {
        move |theta: &[f64]| {
            self.loss_and_grad(theta, loss).map_err(|e| match e {
                PruneError::Tensor(t) => t,
                other => TensorError::Invalid(other.to_string()),
            })
        }
    }
}

/// `∂L_m/∂θ` of the sum-form feature loss. Squaring it entrywise gives the
/// first-order loss change `ΔL_m` per parameter.
pub fn grad_flow(ctx: &ScoreContext<'_>) -> Result<Vec<f64>> {
    Ok(ctx.loss_and_grad(ctx.params.flat(), ScoreLoss::Feature)?.1)
}

/// How `H_ii` is obtained for the LNPT score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnptHessian {
    /// The diagonal entry itself: exact for small nets, Hutchinson otherwise.
    #[default]
    Diag,
    /// Replace `H_ii g_i` with `(Hg)_i`.
    Hg,
}

impl std::str::FromStr for LnptHessian {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "diag" => Ok(Self::Diag),
            "hg" => Ok(Self::Hg),
            _ => Err(format!("unknown hessian mode `{s}` (diag or hg)")),
        }
    }
}

/// `|θ_i · H_ii · g_i|`.
pub fn saliency_lnpt(theta: &[f64], hdiag: &[f64], grad: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(hdiag)
        .zip(grad)
        .map(|((t, h), g)| (t * h * g).abs())
        .collect()
}

/// `|θ_i · g_i|`.
pub fn saliency_snip(theta: &[f64], grad: &[f64]) -> Vec<f64> {
    theta.iter().zip(grad).map(|(t, g)| (t * g).abs()).collect()
}

/// Signed GraSP value `−θ ⊙ Hg`.
pub fn grasp_raw(theta: &[f64], hg: &[f64]) -> Vec<f64> {
    theta.iter().zip(hg).map(|(t, h)| -t * h).collect()
}

/// Maps raw GraSP values to nonnegative scores: each entry scores the number
/// of entries with a strictly larger raw value, so the most negative entry
/// ranks highest and ties share a score.
pub fn grasp_rank(raw: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let mut out = vec![0.0; raw.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && raw[order[j]] == raw[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            out[k] = i as f64;
        }
        i = j;
    }
    out
}

fn finite(ctx_params: &Parameters, scores: Vec<f64>, what: &str) -> Result<ScoreVector> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        let layer = ctx_params
            .layout()
            .iter()
            .find(|p| p.range().contains(&i))
            .map_or_else(|| format!("index {i}"), |p| p.name.clone());
        return Err(PruneError::NonFinite {
            layer,
            context: what.to_string(),
        });
    }
    ScoreVector::new(scores)
}

/// Diagonal method used for a parameter count: exact columns when small.
pub fn diag_method(params: usize, probes: usize) -> DiagMethod {
    if params <= EXACT_DIAG_MAX_PARAMS {
        DiagMethod::Exact
    } else {
        DiagMethod::Hutchinson { probes }
    }
}

/// `S_i = |θ_i · ∂²L_m/∂θ_i² · ∂L_m/∂θ_i|` on the feature loss.
pub fn score_lnpt(ctx: &ScoreContext<'_>, probes: usize, mode: LnptHessian, seed: u64) -> Result<ScoreVector> {
    let theta = ctx.params.flat();
    let grad = grad_flow(ctx)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return finite(ctx.params, vec![f64::NAN; i + 1], "feature-loss gradient");
    }
    let mut obj = ctx.objective(ScoreLoss::Feature);
    let scores = match mode {
        LnptHessian::Diag => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let method = diag_method(theta.len(), probes);
            let h = hessian::hessian_diag(&mut obj, theta, method, DEFAULT_FD_STEP, &mut rng)?;
            saliency_lnpt(theta, &h, &grad)
        }
        LnptHessian::Hg => {
            if grad.iter().all(|g| *g == 0.0) {
                vec![0.0; theta.len()]
            } else {
                let hg = hessian::hvp(&mut obj, theta, &grad, DEFAULT_FD_STEP)?;
                theta.iter().zip(&hg).map(|(t, h)| (t * h).abs()).collect()
            }
        }
    };
    finite(ctx.params, scores, "lnpt score")
}

pub fn score_snip(ctx: &ScoreContext<'_>, loss: ScoreLoss) -> Result<ScoreVector> {
    let (_, grad) = ctx.loss_and_grad(ctx.params.flat(), loss)?;
    finite(ctx.params, saliency_snip(ctx.params.flat(), &grad), "snip score")
}

/// Raw `−θ ⊙ Hg` values before rank conversion.
pub fn grasp_raw_scores(ctx: &ScoreContext<'_>, loss: ScoreLoss) -> Result<Vec<f64>> {
    let theta = ctx.params.flat();
    let (_, grad) = ctx.loss_and_grad(theta, loss)?;
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(vec![0.0; theta.len()]);
    }
    let mut obj = ctx.objective(loss);
    let hg = hessian::hvp(&mut obj, theta, &grad, DEFAULT_FD_STEP)?;
    Ok(grasp_raw(theta, &hg))
}

pub fn score_grasp(ctx: &ScoreContext<'_>, loss: ScoreLoss) -> Result<ScoreVector> {
    let raw = grasp_raw_scores(ctx, loss)?;
    if let Some(i) = raw.iter().position(|s| !s.is_finite()) {
        return finite(ctx.params, vec![f64::NAN; i + 1], "grasp score");
    }
    ScoreVector::new(grasp_rank(&raw))
}

/// Data-free flow score on the `|θ|` network with an all-ones input.
pub fn score_synflow(spec: &ModelSpec, params: &Parameters) -> Result<ScoreVector> {
    let abs: Vec<f64> = params.flat().iter().map(|v| v.abs()).collect();
    let abs_params = params.with_flat(abs.clone())?;
    let mut tape = Tape::new();
    let pv = abs_params.register(&mut tape, true);
    let width = match spec.input {
        InputShape::Flat { dim } => dim,
        other => other.width(),
    };
    let x = tape.constant(Tensor::full(&[1, width], 1.0));
    let out = forward_tape(spec, &mut tape, &pv, x)?;
    let r = tape.sum(out.logits)?;
    tape.backward(r)?;
    let grad = pv.flat_grad(&tape);
    finite(params, saliency_snip(&abs, &grad), "synflow score")
}

pub fn score_magnitude(params: &Parameters) -> Result<ScoreVector> {
    ScoreVector::new(params.flat().iter().map(|v| v.abs()).collect())
}

/// Uniform draws in `[0, 1)`.
pub fn score_random(len: usize, seed: u64) -> ScoreVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScoreVector::new((0..len).map(|_| rng.random::<f64>()).collect()).expect("uniform draws are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init, Layer};

    /// `m_s = w·x + b` feeding a 1x1 classifier.
    fn linear_feature_net() -> ModelSpec {
        ModelSpec::new(
            "lin",
            InputShape::Flat { dim: 1 },
            vec![
                Layer::Dense { inputs: 1, outputs: 1 },
                Layer::Dense { inputs: 1, outputs: 1 },
            ],
            1,
        )
        .unwrap()
    }

    fn teacher_with_features(feats: Vec<f64>, n: usize, m: usize) -> ForwardOutput {
        ForwardOutput {
            logits: Tensor::matrix(n, 1, vec![0.0; n]).unwrap(),
            features: Tensor::matrix(n, m, feats).unwrap(),
        }
    }

    #[test]
    fn feature_loss_values() {
        let a = Tensor::vector(vec![2.0, 0.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(feature_loss(&a, &z).unwrap(), 4.0);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        let s = Tensor::vector(vec![6.0, 0.0]);
        assert_eq!(feature_loss(&s, &z).unwrap(), 9.0 * 4.0);
        assert!(feature_loss(&a, &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn one_parameter_gradient_and_score() {
        let spec = linear_feature_net();
        let params = Parameters::zeros(&spec).with_flat(vec![1.0, 0.0, 0.5, 0.0]).unwrap();
        let batch = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let teacher = teacher_with_features(vec![2.0], 1, 1);
        let ctx = ScoreContext {
            spec: &spec,
            params: &params,
            batch: &batch,
            teacher: &teacher,
            labels: None,
        };
        let g = grad_flow(&ctx).unwrap();
        assert!((g[0] + 2.0).abs() < 1e-12);
        assert!((g[1] + 2.0).abs() < 1e-12);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        let s = score_lnpt(&ctx, 8, LnptHessian::Diag, 0).unwrap();
        assert!((s.as_slice()[0] - 4.0).abs() < 1e-6);
        assert_eq!(&s.as_slice()[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let spec = crate::model::preset("mlp-tiny", InputShape::Flat { dim: 3 }, 2).unwrap();
        let params = init(&spec, 4);
        let teacher_params = init(&spec, 5);
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 1.2, 0.1, -0.4]).unwrap();
        let mut dup = x.data().to_vec();
        dup.extend_from_slice(x.data());
        let x2 = Tensor::matrix(4, 3, dup).unwrap();
        let g = |batch: &Tensor| {
            let teacher = forward(&spec, &teacher_params, batch).unwrap();
            grad_flow(&ScoreContext {
                spec: &spec,
                params: &params,
                batch,
                teacher: &teacher,
                labels: None,
            })
            .unwrap()
        };
        let (g1, g2) = (g(&x), g(&x2));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn identical_teacher_gives_zero_scores() {
        let spec = crate::model::preset("mlp-tiny", InputShape::Flat { dim: 3 }, 2).unwrap();
        let params = init(&spec, 1);
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 1.2, 0.1, -0.4]).unwrap();
        let teacher = forward(&spec, &params, &x).unwrap();
        let ctx = ScoreContext {
            spec: &spec,
            params: &params,
            batch: &x,
            teacher: &teacher,
            labels: None,
        };
        for mode in [LnptHessian::Diag, LnptHessian::Hg] {
            assert!(score_lnpt(&ctx, 4, mode, 0).unwrap().as_slice().iter().all(|s| *s == 0.0));
        }
        assert!(score_snip(&ctx, ScoreLoss::Feature).unwrap().as_slice().iter().all(|s| *s == 0.0));
        assert!(score_grasp(&ctx, ScoreLoss::Feature).unwrap().as_slice().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn snip_hand_value_and_sign_symmetry() {
        // L(w) = w²/2 at w = 3: g = 3.
        assert_eq!(saliency_snip(&[3.0], &[3.0]), vec![9.0]);
        assert_eq!(saliency_snip(&[-3.0], &[-3.0]), vec![9.0]);
        assert_eq!(saliency_snip(&[3.0, 1.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn grasp_on_quadratic() {
        // L = ½‖θ‖²: Hg = g = θ.
        let theta = [1.5, -2.0, 0.5];
        let mut obj = |t: &[f64]| -> crate::tensor::Result<(f64, Vec<f64>)> {
            Ok((0.5 * t.iter().map(|v| v * v).sum::<f64>(), t.to_vec()))
        };
        let hg = hessian::hvp(&mut obj, &theta, &theta, DEFAULT_FD_STEP).unwrap();
        let raw = grasp_raw(&theta, &hg);
        for (r, t) in raw.iter().zip(&theta) {
            assert!((r + t * t).abs() < 1e-9);
            assert!(*r <= 0.0);
        }
        assert_eq!(grasp_rank(&raw), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn grasp_hvp_matches_exact_hessian() {
        // L = ½θᵀAθ with A = [[2,1],[1,3]].
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let mut obj = |t: &[f64]| -> crate::tensor::Result<(f64, Vec<f64>)> {
            let g = vec![a[0][0] * t[0] + a[0][1] * t[1], a[1][0] * t[0] + a[1][1] * t[1]];
            Ok((0.5 * (t[0] * g[0] + t[1] * g[1]), g))
        };
        let theta = [0.7, -1.3];
        let g = obj(&theta).unwrap().1;
        let hg = hessian::hvp(&mut obj, &theta, &g, DEFAULT_FD_STEP).unwrap();
        let exact = [a[0][0] * g[0] + a[0][1] * g[1], a[1][0] * g[0] + a[1][1] * g[1]];
        for (h, e) in hg.iter().zip(&exact) {
            assert!((h - e).abs() < 1e-6);
        }
    }

    #[test]
    fn grasp_rank_ties_share_scores() {
        assert_eq!(grasp_rank(&[0.0, -1.0, 0.0, 2.0]), vec![1.0, 3.0, 1.0, 0.0]);
        assert_eq!(grasp_rank(&[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn synflow_chain_and_dead_path() {
        let spec = linear_feature_net();
        let params = Parameters::zeros(&spec).with_flat(vec![-2.0, 0.0, 3.0, 0.0]).unwrap();
        let s = score_synflow(&spec, &params).unwrap();
        assert_eq!(s.as_slice(), &[6.0, 0.0, 6.0, 0.0]);

        let spec = ModelSpec::new(
            "two",
            InputShape::Flat { dim: 2 },
            vec![
                Layer::Dense { inputs: 2, outputs: 2 },
                Layer::Relu,
                Layer::Dense { inputs: 2, outputs: 1 },
            ],
            1,
        )
        .unwrap();
        // Hidden unit 1 feeds the output through a zero weight.
        let flat = vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let params = Parameters::zeros(&spec).with_flat(flat).unwrap();
        let s = score_synflow(&spec, &params).unwrap();
        assert_eq!(&s.as_slice()[2..4], &[0.0, 0.0]);
        assert!(s.as_slice()[0] > 0.0);
        assert!(s.as_slice().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn control_scores() {
        let spec = crate::model::preset("mlp-tiny", InputShape::Flat { dim: 3 }, 2).unwrap();
        let mut params = init(&spec, 2);
        params.flat_mut()[0] = -2.0;
        let m = score_magnitude(&params).unwrap();
        assert_eq!(m.as_slice()[0], 2.0);
        let bias = params.find("layer0.bias").unwrap();
        assert!(m.as_slice()[params.layout()[bias].range()].iter().all(|v| *v == 0.0));
        assert_eq!(score_random(50, 3), score_random(50, 3));
        assert_ne!(score_random(50, 3), score_random(50, 4));
    }

    #[test]
    fn cross_entropy_loss_uses_pseudo_labels() {
        let spec = crate::model::preset("mlp-tiny", InputShape::Flat { dim: 3 }, 2).unwrap();
        let params = init(&spec, 7);
        let teacher_params = init(&spec, 8);
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.5, 1.2, 0.1, -0.4]).unwrap();
        let teacher = forward(&spec, &teacher_params, &x).unwrap();
        let pseudo: Vec<usize> = (0..2).map(|i| argmax(teacher.logits.row(i))).collect();
        let ctx = |labels| ScoreContext {
            spec: &spec,
            params: &params,
            batch: &x,
            teacher: &teacher,
            labels,
        };
        let a = score_snip(&ctx(None), ScoreLoss::CrossEntropy).unwrap();
        let b = score_snip(&ctx(Some(&pseudo)), ScoreLoss::CrossEntropy).unwrap();
        assert_eq!(a, b);
    }
}
