//! Second-order information from first-order gradients.
//!
//! Hessian-vector products use a central difference of gradients,
//! `Hv ≈ [g(θ + εv) − g(θ − εv)] / 2ε` with `ε = ε₀ / ‖v‖₂`, so the engine
//! only ever needs reverse-mode first derivatives. The Hessian diagonal is
//! either estimated with Hutchinson's Rademacher probes or computed exactly
//! column by column for small parameter counts.

use rand::Rng;

use super::{Result, TensorError};

/// Default finite-difference step `ε₀` for [`hvp`].
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Default number of Hutchinson probes.
pub const DEFAULT_PROBES: usize = 8;

/// Largest parameter count accepted by [`hessian_diag_exact`].
pub const EXACT_DIAG_MAX_PARAMS: usize = 64;

/// A scalar function of a flat parameter vector with its gradient.
pub trait Objective {
    fn value_and_grad(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn grad(&mut self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(theta)?.1)
    }
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn value_and_grad(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(theta)
    }
}

/// How the Hessian diagonal is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagMethod {
    Hutchinson { probes: usize },
    Exact,
}

fn shifted(theta: &[f64], v: &[f64], step: f64) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + step * d).collect()
}

/// Hessian-vector product by central differences of the gradient.
pub fn hvp<O: Objective + ?Sized>(obj: &mut O, theta: &[f64], v: &[f64], eps0: f64) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(TensorError::Shape {
            op: "hvp",
            shapes: vec![vec![theta.len()], vec![v.len()]],
        });
    }
    if !(eps0.is_finite() && eps0 > 0.0) {
        return Err(TensorError::Invalid(format!("hvp: step must be positive, got {eps0}")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(TensorError::DegenerateProbe);
    }
    let eps = eps0 / norm;
    let plus = obj.grad(&shifted(theta, v, eps))?;
    let minus = obj.grad(&shifted(theta, v, -eps))?;
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect();
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite {
            context: format!("hvp entry {i}"),
        });
    }
    Ok(out)
}

/// Hutchinson estimate `(1/K) Σ_k v_k ⊙ H v_k` with Rademacher `v_k`.
pub fn hessian_diag_hutchinson<O, R>(
    obj: &mut O,
    theta: &[f64],
    probes: usize,
    eps0: f64,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    if probes == 0 {
        return Err(TensorError::Invalid("hutchinson: need at least one probe".into()));
    }
    let mut acc = vec![0.0; theta.len()];
    for _ in 0..probes {
        let v: Vec<f64> = (0..theta.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let hv = hvp(obj, theta, &v, eps0)?;
        for ((a, vi), h) in acc.iter_mut().zip(&v).zip(&hv) {
            *a += vi * h;
        }
    }
    let k = probes as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// Exact Hessian diagonal from one HVP per coordinate basis vector.
pub fn hessian_diag_exact<O: Objective + ?Sized>(obj: &mut O, theta: &[f64], eps0: f64) -> Result<Vec<f64>> {
    if theta.len() > EXACT_DIAG_MAX_PARAMS {
        return Err(TensorError::Invalid(format!(
            "exact Hessian diagonal limited to {EXACT_DIAG_MAX_PARAMS} parameters, got {}",
            theta.len()
        )));
    }
    let mut diag = Vec::with_capacity(theta.len());
    let mut e = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        e[i] = 1.0;
        diag.push(hvp(obj, theta, &e, eps0)?[i]);
        e[i] = 0.0;
    }
    Ok(diag)
}

pub fn hessian_diag<O, R>(
    obj: &mut O,
    theta: &[f64],
    method: DiagMethod,
    eps0: f64,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    match method {
        DiagMethod::Hutchinson { probes } => hessian_diag_hutchinson(obj, theta, probes, eps0, rng),
        DiagMethod::Exact => hessian_diag_exact(obj, theta, eps0),
    }
}
