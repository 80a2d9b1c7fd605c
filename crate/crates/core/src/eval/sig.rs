use rand::Rng;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::sim::derive_rng;

pub const PERMUTATION_RESAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigTest {
    pub n: usize,
    /// Mean of `errors_1 - errors_2`.
    pub mean_diff: f64,
    pub z: f64,
    /// Two-sided, normal approximation.
    pub p_normal: f64,
    /// Two-sided sign-permutation p-value, `(b + 1) / (N + 1)`.
    pub p_permutation: f64,
}

/// Matched-pairs test on per-utterance error counts of two systems scored
/// on the same utterances in the same order.
pub fn mapsswe_test(sys1: &[f64], sys2: &[f64], seed: u64) -> Result<SigTest> {
    if sys1.len() != sys2.len() {
        return Err(Error::Data(format!("{} vs {} utterances", sys1.len(), sys2.len())));
    }
    let n = sys1.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 utterances, got {n}")));
    }
    let d: Vec<f64> = sys1.iter().zip(sys2).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (z, p_normal) = if mean == 0.0 {
        (0.0, 1.0)
    } else if var == 0.0 {
        (mean.signum() * f64::INFINITY, 0.0)
    } else {
        let z = mean / (var.sqrt() / (n as f64).sqrt());
        (z, erfc(z.abs() / std::f64::consts::SQRT_2))
    };
    let observed = d.iter().sum::<f64>().abs();
    let mut rng = derive_rng(seed, "mapsswe", 0);
    let mut hits = 0usize;
    for _ in 0..PERMUTATION_RESAMPLES {
        let s: f64 = d.iter().map(|&x| if rng.gen::<bool>() { x } else { -x }).sum();
        if s.abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    Ok(SigTest {
        n,
        mean_diff: mean,
        z,
        p_normal,
        p_permutation: (hits + 1) as f64 / (PERMUTATION_RESAMPLES + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_systems() {
        let a = [3.0, 0.0, 1.0, 2.0];
        let t = mapsswe_test(&a, &a, 1).unwrap();
        assert_eq!((t.z, t.p_normal, t.p_permutation), (0.0, 1.0, 1.0));
        assert!(mapsswe_test(&[1.0], &[2.0], 1).is_err());
        assert!(mapsswe_test(&[1.0, 2.0], &[2.0], 1).is_err());
    }

    #[test]
    fn one_extra_error_everywhere() {
        let a: Vec<f64> = (0..100).map(|i| (i % 5) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let t = mapsswe_test(&a, &b, 1).unwrap();
        assert!(t.z < -1e6 && t.p_normal < 1e-6);
        assert_eq!(t.p_permutation, 1.0 / 10_001.0);
    }

    #[test]
    fn permutation_agrees_with_normal_on_gaussian_differences() {
        for (seed, shift) in [(1u64, 0.0), (2, 0.05), (3, 0.1), (4, 0.15), (5, 0.25)] {
            let mut rng = derive_rng(seed, "test", 0);
            let dist = Normal::new(shift, 1.0).unwrap();
            let d: Vec<f64> = (0..200).map(|_| dist.sample(&mut rng)).collect();
            let t = mapsswe_test(&d, &vec![0.0; 200], seed).unwrap();
            assert!((t.p_normal - t.p_permutation).abs() < 0.02, "{t:?}");
        }
    }
}
