use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// How the pruning score batch is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSampling {
    /// Balanced by the dataset's own labels.
    BalancedTrue,
    /// Balanced by teacher argmax.
    #[default]
    BalancedPseudo,
    Uniform,
}

impl std::str::FromStr for ScoreSampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "balanced-true" => Ok(Self::BalancedTrue),
            "balanced-pseudo" => Ok(Self::BalancedPseudo),
            "uniform" => Ok(Self::Uniform),
            _ => Err(format!("unknown score sampling `{s}`")),
        }
    }
}

/// Picks row indices for the scoring batch.
///
/// `class_of` gives the class used for balancing: true labels for
/// `BalancedTrue`, teacher pseudo-labels for `BalancedPseudo`; it is ignored
/// by `Uniform`. Balanced modes take up to `per_class` rows of each class
/// (fewer if a class is short). Uniform draws `per_class * classes` rows.
/// Indices come back grouped by class, ascending within a class.
pub fn score_batch(
    n: usize,
    classes: usize,
    sampling: ScoreSampling,
    class_of: Option<&[usize]>,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sampling == ScoreSampling::Uniform {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.truncate((per_class * classes).min(n));
        order.sort_unstable();
        return Ok(order);
    }
    let class_of = class_of.ok_or_else(|| DataError::Invalid("balanced sampling needs class assignments".into()))?;
    if class_of.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: class_of.len(),
        });
    }
    let mut buckets = vec![Vec::new(); classes];
    for (i, &c) in class_of.iter().enumerate() {
        buckets
            .get_mut(c)
            .ok_or(DataError::LabelRange { label: c, classes })?
            .push(i);
    }
    let mut out = Vec::with_capacity(per_class * classes);
    for bucket in &mut buckets {
        bucket.shuffle(&mut rng);
        let mut pick = bucket[..per_class.min(bucket.len())].to_vec();
        pick.sort_unstable();
        out.extend(pick);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + i / 3) % k).collect()
    }

    #[test]
    fn balanced_true_has_exact_composition() {
        let y = labels(1000, 10);
        let idx = score_batch(1000, 10, ScoreSampling::BalancedTrue, Some(&y), 10, 3).unwrap();
        assert_eq!(idx.len(), 100);
        let mut counts = [0; 10];
        idx.iter().for_each(|&i| counts[y[i]] += 1);
        assert_eq!(counts, [10; 10]);
    }

    #[test]
    fn uniform_is_reproducible() {
        let a = score_batch(500, 4, ScoreSampling::Uniform, None, 10, 9).unwrap();
        assert_eq!(a, score_batch(500, 4, ScoreSampling::Uniform, None, 10, 9).unwrap());
        assert_eq!(a.len(), 40);
        assert_ne!(a, score_batch(500, 4, ScoreSampling::Uniform, None, 10, 10).unwrap());
    }

    #[test]
    fn perfect_teacher_matches_true_labels() {
        let y = labels(300, 3);
        // A teacher that is always right produces the label vector itself.
        let pseudo: Vec<usize> = y.clone();
        let t = score_batch(300, 3, ScoreSampling::BalancedTrue, Some(&y), 10, 5).unwrap();
        let p = score_batch(300, 3, ScoreSampling::BalancedPseudo, Some(&pseudo), 10, 5).unwrap();
        assert_eq!(t, p);
    }

    #[test]
    fn short_class_yields_what_exists() {
        let y = vec![0, 0, 0, 1];
        let idx = score_batch(4, 2, ScoreSampling::BalancedTrue, Some(&y), 2, 0).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx[2], 3);
    }

    #[test]
    fn names_parse() {
        assert_eq!("balanced-pseudo".parse::<ScoreSampling>().unwrap(), ScoreSampling::BalancedPseudo);
        assert!("balanced".parse::<ScoreSampling>().is_err());
    }
}
