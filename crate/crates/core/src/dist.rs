//! Finite probability vectors and log-space numerics.

use crate::error::{validation, Result};

/// Tolerance on the total mass of a [`Distribution`].
pub const NORM_TOL: f64 = 1e-9;

/// A probability vector over a finite, index-labelled support.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and unit mass.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(validation("distribution has empty support"));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
            return Err(validation(format!("probability {p} at index {i} is not a finite non-negative number")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(validation(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Renormalizes non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(validation(format!("weights sum to {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn one_hot(n: usize, at: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Self { probs }
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Indices with nonzero mass.
    pub fn support(&self) -> Vec<usize> {
        self.probs.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, _)| i).collect()
    }

    /// Index of the largest entry, ties to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw for a uniform variate `u` in `[0, 1)`. Zero-mass
    /// entries are never returned.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(d: &Distribution) -> f64 {
    let h: f64 = d.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// `ln Σ exp(x_i)` with a max shift.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(validation("log_sum_exp of an empty slice"));
    }
    Ok(lse(xs))
}

pub(crate) fn lse(xs: &[f64]) -> f64 {
    if xs.len() == 1 {
        return xs[0];
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of log-weights.
pub fn normalize_logs(xs: &[f64]) -> Result<Distribution> {
    let z = log_sum_exp(xs)?;
    if !z.is_finite() {
        return Err(validation(format!("log normalizer is {z}")));
    }
    Ok(Distribution { probs: xs.iter().map(|x| (x - z).exp()).collect() })
}

/// In-place log-softmax.
pub(crate) fn log_softmax_in_place(xs: &mut [f64]) {
    let z = lse(xs);
    for x in xs.iter_mut() {
        *x -= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(entropy(&Distribution::uniform(4)), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&Distribution::new(vec![1.0, 0.0, 0.0]).unwrap()), 0.0);
        assert_abs_diff_eq!(entropy(&Distribution::new(vec![0.5, 0.5]).unwrap()), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    #[test]
    fn log_sum_exp_examples() {
        assert_eq!(log_sum_exp(&[0.0]).unwrap(), 0.0);
        let l2 = 2f64.ln();
        assert_abs_diff_eq!(log_sum_exp(&[l2, l2]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn log_sum_exp_does_not_underflow() {
        // The naive route underflows to ln(0) = -inf; the exact value is -1000 + ln 2.
        let naive = ((-1000f64).exp() + (-1000f64).exp()).ln();
        assert_eq!(naive, f64::NEG_INFINITY);
        let got = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert_abs_diff_eq!(got, -1000.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let d = normalize_logs(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.5, epsilon = 1e-15);
        let d = normalize_logs(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(d.probs()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn normalize_matches_naive_at_small_magnitude() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let total: f64 = w.iter().sum();
        let d = normalize_logs(&xs).unwrap();
        for (p, wi) in d.probs().iter().zip(&w) {
            assert_abs_diff_eq!(*p, wi / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_with_skips_zero_mass() {
        let d = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(d.sample_with(0.0), 1);
        assert_eq!(d.sample_with(0.999_999), 1);
    }

    proptest! {
        #[test]
        fn entropy_permutation_invariant(xs in prop::collection::vec(-5.0f64..5.0, 2..12), rot in 0usize..12) {
            let d = normalize_logs(&xs).unwrap();
            let mut p = d.probs().to_vec();
            let r = rot % p.len();
            p.rotate_left(r);
            p.reverse();
            let e = entropy(&Distribution::new(p).unwrap());
            prop_assert!((e - entropy(&d)).abs() < 1e-12);
            prop_assert!(e <= (xs.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn normalize_is_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..16), c in -500.0f64..500.0) {
            let a = normalize_logs(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = normalize_logs(&shifted).unwrap();
            for (p, q) in a.probs().iter().zip(b.probs()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn sharpening_does_not_raise_entropy(xs in prop::collection::vec(-4.0f64..4.0, 2..10), b1 in 1.0f64..4.0, db in 0.0f64..4.0) {
            let scale = |b: f64| xs.iter().map(|x| b * x).collect::<Vec<_>>();
            let h1 = entropy(&normalize_logs(&scale(b1)).unwrap());
            let h2 = entropy(&normalize_logs(&scale(b1 + db)).unwrap());
            prop_assert!(h2 <= h1 + 1e-12);
        }
    }
}
