use super::{DistillError, Result};
use crate::tensor::{argmax, softmax_rows, Tape, Tensor, TensorError, Var};

/// `N x K` one-hot rows for integer classes.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut t = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(DistillError::Config(format!("class {c} out of range for {k} classes")));
        }
        t[i * k + c] = 1.0;
    }
    Ok(Tensor::matrix(classes.len(), k, t)?)
}

/// Teacher argmax as one-hot targets; ties go to the lowest class.
pub fn pseudo_onehot(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2("pseudo_onehot")?;
    if !logits.all_finite() {
        return Err(TensorError::NonFinite {
            context: "teacher logits".into(),
        }
        .into());
    }
    let classes: Vec<usize> = (0..n).map(|i| argmax(logits.row(i))).collect();
    one_hot(&classes, k)
}

/// `L_oh`: mean cross-entropy of `σ(student)` against one-hot targets.
pub fn loss_oh(tape: &mut Tape, student_logits: Var, targets: Var) -> Result<Var> {
    Ok(tape.cross_entropy(student_logits, targets)?)
}

/// `L_m = MSE(m_t, m_s / T)`, or `MSE(m_t / T, m_s / T)` when symmetric.
pub fn loss_feature_kd(tape: &mut Tape, m_t: Var, m_s: Var, temperature: f64, symmetric: bool) -> Result<Var> {
    let scaled_s = tape.scale(m_s, 1.0 / temperature)?;
    let target = if symmetric {
        tape.scale(m_t, 1.0 / temperature)?
    } else {
        m_t
    };
    Ok(tape.mse(target, scaled_s)?)
}

/// Value of `MSE(m_t, m_s / T)` for plain tensors.
pub fn feature_kd(m_t: &Tensor, m_s: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(m_t.clone());
    let b = tape.constant(m_s.clone());
    let l = loss_feature_kd(&mut tape, a, b, temperature, false)?;
    Ok(tape.value(l).item()?)
}

/// `σ(f_t / T)` row-wise.
pub fn soft_targets(teacher_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (_, k) = teacher_logits.dims2("soft_targets")?;
    let scaled: Vec<f64> = teacher_logits.data().iter().map(|v| v / temperature).collect();
    Ok(Tensor::new(teacher_logits.shape().to_vec(), softmax_rows(&scaled, k))?)
}

/// `H_cross(σ(f_s), σ(f_t / T))` with the soft targets already on the tape.
pub fn kd_soft_term(tape: &mut Tape, student_logits: Var, soft: Var) -> Result<Var> {
    Ok(tape.cross_entropy(student_logits, soft)?)
}

/// `H_cross(σ(f_s), y) + α·H_cross(σ(f_s), σ(f_t / T))`.
pub fn loss_kd_classical(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &Tensor,
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    let y = tape.constant(labels.clone());
    let hard = tape.cross_entropy(student_logits, y)?;
    let soft = tape.constant(soft_targets(teacher_logits, temperature)?);
    let kd = kd_soft_term(tape, student_logits, soft)?;
    let kd = tape.scale(kd, alpha)?;
    Ok(tape.add(hard, kd)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value_oh(logits: Vec<f64>, targets: Vec<f64>, k: usize) -> f64 {
        let n = logits.len() / k;
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(n, k, logits).unwrap());
        let t = tape.constant(Tensor::matrix(n, k, targets).unwrap());
        let v = loss_oh(&mut tape, l, t).unwrap();
        tape.value(v).item().unwrap()
    }

    #[test]
    fn pseudo_onehot_examples() {
        let t = pseudo_onehot(&Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(pseudo_onehot(&Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn oh_loss_values() {
        let uniform = value_oh(vec![0.0; 10], one_hot(&[3], 10).unwrap().into_data(), 10);
        assert!((uniform - 10f64.ln()).abs() < 1e-12);
        let confident = value_oh(vec![0.0, 800.0, 0.0], vec![0.0, 1.0, 0.0], 3);
        assert!(confident < 1e-12);
        let a = value_oh(vec![0.1, 2.0, -1.0], vec![0.0, 0.0, 1.0], 3);
        let b = value_oh(vec![-1.0, 0.1, 2.0], vec![1.0, 0.0, 0.0], 3);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn feature_kd_values() {
        let mt = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let ms = Tensor::matrix(1, 2, vec![3.0, 1.0]).unwrap();
        assert!((feature_kd(&mt, &ms, 2.0).unwrap() - 0.25).abs() < 1e-15);
        let ms = Tensor::matrix(1, 2, vec![4.0, 4.0]).unwrap();
        assert_eq!(feature_kd(&mt, &ms, 4.0).unwrap(), 0.0);
        let a = feature_kd(&Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap(), &Tensor::matrix(1, 3, vec![0., 5., 1.]).unwrap(), 2.0);
        let b = feature_kd(&Tensor::matrix(1, 3, vec![3., 1., 2.]).unwrap(), &Tensor::matrix(1, 3, vec![1., 0., 5.]).unwrap(), 2.0);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn classical_kd_identities() {
        let s = Tensor::matrix(1, 3, vec![0.5, -0.2, 1.0]).unwrap();
        let y = one_hot(&[2], 3).unwrap();
        let eval = |alpha: f64, t: f64, teacher: &Tensor| {
            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let v = loss_kd_classical(&mut tape, sv, teacher, &y, alpha, t).unwrap();
            tape.value(v).item().unwrap()
        };
        let ce = value_oh(s.data().to_vec(), y.data().to_vec(), 3);
        assert!((eval(0.0, 4.0, &s) - ce).abs() < 1e-14);
        // At T = 1 with teacher == student the soft term is the entropy of σ(f).
        let p = softmax_rows(s.data(), 3);
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((eval(1.0, 1.0, &s) - ce - entropy).abs() < 1e-12);
        // Large T flattens the teacher to uniform: soft term → mean of −log σ(f_s).
        let big = eval(1.0, 1e9, &s) - ce;
        let logp = crate::tensor::log_softmax_rows(s.data(), 3);
        let uniform_ce = -logp.iter().sum::<f64>() / 3.0;
        assert!((big - uniform_ce).abs() < 1e-6);
    }

    #[test]
    fn total_gradient_is_linear() {
        // grad(L_oh + α L_m) == grad(L_oh) + α grad(L_m).
        let alpha = 0.7;
        let x0 = vec![0.3, -0.4, 1.1, 0.2];
        let targets = one_hot(&[1, 0], 2).unwrap();
        let mt = Tensor::matrix(2, 2, vec![0.5, 0.1, -0.3, 0.8]).unwrap();
        let grads = |w_oh: f64, w_m: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::matrix(2, 2, x0.clone()).unwrap(), true);
            let t = tape.constant(targets.clone());
            let m = tape.constant(mt.clone());
            let oh = loss_oh(&mut tape, x, t).unwrap();
            let lm = loss_feature_kd(&mut tape, m, x, 4.0, false).unwrap();
            let a = tape.scale(oh, w_oh).unwrap();
            let b = tape.scale(lm, w_m).unwrap();
            let total = tape.add(a, b).unwrap();
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let total = grads(1.0, alpha);
        let oh = grads(1.0, 0.0);
        let lm = grads(0.0, 1.0);
        for i in 0..4 {
            assert!((total[i] - oh[i] - alpha * lm[i]).abs() < 1e-12);
        }
    }
}
