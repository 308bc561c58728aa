//! Adaptive symmetric score normalization against a top-k cohort.

use crate::error::{Error, Result};

/// Population-std floor for cohort statistics.
pub const STD_FLOOR: f64 = 1e-8;

/// Scores of one trial side against every cohort embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortScores {
    pub scores: Vec<f64>,
}

impl CohortScores {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    /// The `k` largest scores, descending.
    pub fn top_k(&self, k: usize) -> Result<Vec<f64>> {
        if k > self.scores.len() {
            return Err(Error::Insufficient(format!(
                "s-norm top-k {k} exceeds cohort size {}",
                self.scores.len()
            )));
        }
        let mut s = self.scores.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s.truncate(k);
        Ok(s)
    }

    /// Mean and floored population std of the top `k` scores.
    pub fn top_stats(&self, k: usize) -> Result<(f64, f64)> {
        if k < 2 {
            return Err(Error::Config("s-norm top-k must be at least 2".into()));
        }
        let top = self.top_k(k)?;
        let n = top.len() as f64;
        let mean = top.iter().sum::<f64>() / n;
        let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok((mean, var.sqrt().max(STD_FLOOR)))
    }
}

/// `0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)`.
pub fn adaptive_snorm(raw: f64, enroll_cohort: &CohortScores, test_cohort: &CohortScores, k: usize) -> Result<f64> {
    let (mu_e, sd_e) = enroll_cohort.top_stats(k)?;
    let (mu_t, sd_t) = test_cohort.top_stats(k)?;
    Ok(0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        // Top-2 of enroll = {1.5, 0.5}: mean 1, std 0.5. Top-2 of test = {1, -1}: mean 0, std 1.
        let e = CohortScores::new(vec![0.5, -3.0, 1.5, -2.0]);
        let t = CohortScores::new(vec![-1.0, 1.0, -5.0]);
        assert_eq!(e.top_stats(2).unwrap(), (1.0, 0.5));
        assert_eq!(t.top_stats(2).unwrap(), (0.0, 1.0));
        assert_eq!(adaptive_snorm(2.0, &e, &t, 2).unwrap(), 2.0);
    }

    #[test]
    fn standardized_cohorts_are_identity() {
        let c = CohortScores::new(vec![1.0, -1.0, -10.0]);
        for raw in [-3.0, 0.0, 0.7, 12.5] {
            assert_eq!(adaptive_snorm(raw, &c, &c, 2).unwrap(), raw);
        }
    }

    #[test]
    fn constant_cohort_is_finite() {
        let c = CohortScores::new(vec![0.3; 10]);
        let v = adaptive_snorm(0.4, &c, &c, 5).unwrap();
        assert!(v.is_finite());
        assert_eq!(c.top_stats(5).unwrap().1, STD_FLOOR);
    }

    #[test]
    fn k_too_large() {
        let c = CohortScores::new(vec![0.1, 0.2]);
        assert!(adaptive_snorm(0.0, &c, &c, 3).is_err());
        assert!(adaptive_snorm(0.0, &c, &c, 1).is_err());
    }

    #[test]
    fn joint_shift_invariance() {
        let e = CohortScores::new(vec![0.1, 0.9, -0.4, 0.35, 0.6]);
        let t = CohortScores::new(vec![-0.2, 0.15, 0.8, 0.05]);
        let base = adaptive_snorm(0.7, &e, &t, 3).unwrap();
        for c in [-5.0, 0.25, 3.0] {
            let es = CohortScores::new(e.scores.iter().map(|v| v + c).collect());
            let ts = CohortScores::new(t.scores.iter().map(|v| v + c).collect());
            assert!((adaptive_snorm(0.7 + c, &es, &ts, 3).unwrap() - base).abs() < 1e-10);
        }
    }
}
