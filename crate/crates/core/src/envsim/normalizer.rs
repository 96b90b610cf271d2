use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::PolicyParams;

/// Variance floor applied before taking the square root in [`StateNormalizer::apply`].
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Online (Welford) estimate of per-coordinate state mean and population variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNormalizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    #[serde(default = "enabled_default")]
    enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl StateNormalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            enabled: true,
        }
    }

    /// A normalizer that never updates and always maps states to themselves.
    pub fn identity(dim: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(dim)
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population variance (divides by `count`).
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|m| m / n).collect()
    }

    pub fn observe(&mut self, s: &[f64]) {
        debug_assert_eq!(s.len(), self.dim());
        if !self.enabled {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        for ((mean, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(s) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    /// Folds in statistics gathered independently (Chan et al. pairwise update),
    /// so parallel rollouts can be merged in a fixed order.
    pub fn merge(&mut self, other: &StateNormalizer) {
        if !self.enabled || other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// `(s - mean) / sqrt(var + floor)`; identity until two states have been seen.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        if self.count < 2 {
            return s.to_vec();
        }
        let var = self.variance();
        s.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((x, m), v)| (x - m) / (v + VARIANCE_FLOOR).sqrt())
            .collect()
    }

    /// Raw-state affine policy `a = K s + c` equivalent to `a = x · apply(s)`
    /// under the current statistics.
    pub fn affine_policy(&self, params: &PolicyParams) -> (DMatrix<f64>, DVector<f64>) {
        let x = params.matrix();
        if self.count < 2 {
            return (x.clone(), DVector::zeros(params.action_dim()));
        }
        let var = self.variance();
        let inv_sd = DVector::from_iterator(
            self.dim(),
            var.iter().map(|v| 1.0 / (v + VARIANCE_FLOOR).sqrt()),
        );
        let gain = &x * DMatrix::from_diagonal(&inv_sd);
        let offset = -(&gain * DVector::from_column_slice(&self.mean));
        (gain, offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_before_two_observations() {
        let mut n = StateNormalizer::new(2);
        assert_eq!(n.apply(&[3.0, -1.0]), vec![3.0, -1.0]);
        n.observe(&[1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, -1.0]), vec![3.0, -1.0]);
    }

    #[test]
    fn two_point_population_variance() {
        let mut n = StateNormalizer::new(1);
        n.observe(&[0.0]);
        n.observe(&[2.0]);
        assert!((n.variance()[0] - 1.0).abs() < 1e-15);
        assert!((n.apply(&[2.0])[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_observations_map_to_zero() {
        let mut n = StateNormalizer::new(2);
        for _ in 0..10 {
            n.observe(&[4.0, -2.0]);
        }
        let out = n.apply(&[4.0, -2.0]);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn welford_matches_batch(xs in prop::collection::vec(-100.0f64..100.0, 1..200)) {
            let mut n = StateNormalizer::new(1);
            for &x in &xs {
                n.observe(&[x]);
            }
            let (mean, var) = crate::linalg::mean_var(&xs);
            prop_assert!((n.mean()[0] - mean).abs() < 1e-10);
            prop_assert!((n.variance()[0] - var).abs() < 1e-10 * (1.0 + var));
        }

        #[test]
        fn merge_equals_sequential(
            xs in prop::collection::vec(-10.0f64..10.0, 0..50),
            ys in prop::collection::vec(-10.0f64..10.0, 0..50),
        ) {
            let mut seq = StateNormalizer::new(1);
            let mut a = StateNormalizer::new(1);
            let mut b = StateNormalizer::new(1);
            for &x in &xs { seq.observe(&[x]); a.observe(&[x]); }
            for &y in &ys { seq.observe(&[y]); b.observe(&[y]); }
            a.merge(&b);
            prop_assert_eq!(a.count(), seq.count());
            prop_assert!((a.mean()[0] - seq.mean()[0]).abs() < 1e-10);
            prop_assert!((a.variance()[0] - seq.variance()[0]).abs() < 1e-9);
        }
    }
}
