use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, Result, Split};
use crate::model::InputShape;

/// Gaussian blobs around `K` centers drawn uniformly from `[-5, 5]^dim`.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || dim == 0 || spread < 0.0 {
        return Err(DataError::Invalid("blobs need classes > 0, dim > 0, spread >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
    let mut inputs = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(centers[c * dim + j] + spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, InputShape::Flat { dim }, Some(labels), classes, Split::Train)
}

/// Centers used by [`synth_blobs`] for a given seed.
pub fn blob_centers(classes: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes * dim).map(|_| rng.random_range(-5.0..5.0)).collect()
}

/// `K` interleaved spiral arms in the plane. Arm `c` starts at angle
/// `2πc/K` and sweeps 1.5 radians per unit radius; `noise` is the std of
/// isotropic Gaussian jitter.
pub fn synth_spirals(classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || noise < 0.0 {
        return Err(DataError::Invalid("spirals need classes > 0 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            let r: f64 = rng.random_range(0.05..1.0);
            let phi = 2.0 * PI * c as f64 / classes as f64 + 1.5 * PI * r;
            let zx: f64 = StandardNormal.sample(&mut rng);
            let zy: f64 = StandardNormal.sample(&mut rng);
            inputs.push(r * phi.cos() + noise * zx);
            inputs.push(r * phi.sin() + noise * zy);
            labels.push(c);
        }
    }
    Dataset::new(inputs, InputShape::Flat { dim: 2 }, Some(labels), classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_collapses_to_centers() {
        let ds = synth_blobs(3, 5, 4, 0.0, 2).unwrap();
        let centers = blob_centers(3, 4, 2);
        for (i, row) in ds.raw_inputs().chunks(4).enumerate() {
            let c = ds.labels().unwrap()[i];
            assert_eq!(row, &centers[c * 4..(c + 1) * 4]);
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(synth_blobs(2, 10, 3, 0.5, 1).unwrap(), synth_blobs(2, 10, 3, 0.5, 1).unwrap());
        assert_ne!(synth_blobs(2, 10, 3, 0.5, 1).unwrap(), synth_blobs(2, 10, 3, 0.5, 2).unwrap());
        assert_eq!(synth_spirals(4, 20, 0.05, 3).unwrap(), synth_spirals(4, 20, 0.05, 3).unwrap());
    }

    #[test]
    fn spirals_shape() {
        let ds = synth_spirals(4, 25, 0.0, 0).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.dim(), 2);
        assert!(ds.raw_inputs().iter().all(|v| v.abs() <= 1.0));
    }

    /// Softmax regression fitted by plain gradient descent, written out
    /// independently of the autodiff engine.
    fn logistic_train_accuracy(ds: &Dataset) -> f64 {
        let (n, d, k) = (ds.len(), ds.dim(), ds.classes());
        let x = ds.raw_inputs();
        let y = ds.labels().unwrap();
        let mut w = vec![0.0; k * (d + 1)];
        for _ in 0..500 {
            let mut g = vec![0.0; w.len()];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                let z: Vec<f64> = (0..k)
                    .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * xi[j]).sum::<f64>())
                    .collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..k {
                    let r = e[c] / s - f64::from(u8::from(y[i] == c));
                    for j in 0..d {
                        g[c * (d + 1) + j] += r * xi[j] / n as f64;
                    }
                    g[c * (d + 1) + d] += r / n as f64;
                }
            }
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= 0.1 * b);
        }
        let correct = (0..n)
            .filter(|&i| {
                let xi = &x[i * d..(i + 1) * d];
                let z: Vec<f64> = (0..k)
                    .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * xi[j]).sum::<f64>())
                    .collect();
                crate::tensor::argmax(&z) == y[i]
            })
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let k = 4;
        let dim = 5;
        let centers = blob_centers(k, dim, 8);
        let mut min_dist = f64::MAX;
        for a in 0..k {
            for b in a + 1..k {
                let d: f64 = (0..dim)
                    .map(|j| (centers[a * dim + j] - centers[b * dim + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        let ds = synth_blobs(k, 50, dim, 0.1 * min_dist, 8).unwrap();
        assert!(logistic_train_accuracy(&ds) >= 0.99);
    }
}
