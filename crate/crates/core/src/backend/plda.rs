//! Two-covariance PLDA: `x = y_s + e`, `y_s ~ N(mean, B)`, `e ~ N(0, W)`.
//!
//! Trained by exact EM over the latent speaker variables; verification
//! scores are same-speaker versus different-speaker log-likelihood ratios.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EmbeddingSet;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative eigenvalue floor applied to `B` and `W`.
pub const COV_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoCovPlda {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
    scoring: ScoringTerms,
}

#[derive(Debug, Clone, PartialEq)]
struct ScoringTerms {
    /// Quadratic weight on each side.
    q: DMatrix<f64>,
    /// Cross-term weight.
    p: DMatrix<f64>,
    constant: f64,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain(format!("{what} is not positive definite")))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((sym(&chol.inverse()), logdet))
}

/// Raises eigenvalues below `floor` to `floor`; returns whether any moved.
fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(sym(m));
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (sym(m), false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (sym(&r), true)
}

impl TwoCovPlda {
    pub fn new(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if between.shape() != (d, d) || within.shape() != (d, d) {
            return Err(Error::shape(
                "plda covariances",
                format!("{d}x{d}"),
                format!("{:?}/{:?}", between.shape(), within.shape()),
            ));
        }
        let between = sym(&between);
        let within = sym(&within);
        let total = &between + &within;
        let (total_inv, total_logdet) = spd_inverse_logdet(&total, "B + W")?;
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&total);
        joint.view_mut((d, d), (d, d)).copy_from(&total);
        joint.view_mut((0, d), (d, d)).copy_from(&between);
        joint.view_mut((d, 0), (d, d)).copy_from(&between);
        let (joint_inv, joint_logdet) = spd_inverse_logdet(&joint, "same-speaker covariance")?;
        let a = sym(&joint_inv.view((0, 0), (d, d)).into_owned());
        let c = sym(&joint_inv.view((0, d), (d, d)).into_owned());
        let scoring = ScoringTerms {
            q: &total_inv - a,
            p: c,
            constant: total_logdet - 0.5 * joint_logdet,
        };
        Ok(Self {
            mean,
            between,
            within,
            scoring,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log p(e, t | same) - log p(e, t | different)`; exactly symmetric in
    /// its arguments.
    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        if enroll.len() != self.dim() || test.len() != self.dim() {
            return Err(Error::shape(
                "plda score input",
                self.dim(),
                enroll.len().max(test.len()),
            ));
        }
        let e = enroll - &self.mean;
        let t = test - &self.mean;
        let s = &self.scoring;
        let quad = e.dot(&(&s.q * &e)) + t.dot(&(&s.q * &t));
        let cross = e.dot(&(&s.p * &t)) + t.dot(&(&s.p * &e));
        Ok(0.5 * quad - 0.5 * cross + s.constant)
    }

    /// Marginal log-likelihood of labeled data under the model.
    pub fn log_likelihood(&self, x: &EmbeddingSet) -> Result<f64> {
        let stats = SpeakerStats::collect(x)?;
        stats.log_likelihood(&self.mean, &self.between, &self.within)
    }
}

/// Sufficient statistics for EM.
struct SpeakerStats {
    dim: usize,
    total: usize,
    /// `(count, sum)` per speaker.
    speakers: Vec<(usize, DVector<f64>)>,
    /// `sum_i x_i x_i^T` over all rows.
    scatter: DMatrix<f64>,
    sum: DVector<f64>,
}

impl SpeakerStats {
    fn collect(x: &EmbeddingSet) -> Result<Self> {
        let groups = x.groups()?;
        let d = x.dim();
        let mut speakers = Vec::with_capacity(groups.len());
        for g in &groups {
            let mut s = DVector::zeros(d);
            for &i in g {
                s += x.row(i);
            }
            speakers.push((g.len(), s));
        }
        let scatter = x.matrix.tr_mul(&x.matrix);
        let sum = x.matrix.row_sum().transpose();
        Ok(Self {
            dim: d,
            total: x.len(),
            speakers,
            scatter,
            sum,
        })
    }

    fn centered_scatter(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let n = self.total as f64;
        &self.scatter - &self.sum * mean.transpose() - mean * self.sum.transpose() + mean * mean.transpose() * n
    }

    fn log_likelihood(&self, mean: &DVector<f64>, b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
        let d = self.dim as f64;
        let (b_inv, b_logdet) = spd_inverse_logdet(b, "between covariance")?;
        let (w_inv, w_logdet) = spd_inverse_logdet(w, "within covariance")?;
        let mut ll = -0.5 * (w_inv.component_mul(&self.centered_scatter(mean))).sum();
        ll -= 0.5 * self.total as f64 * (d * LN_2PI + w_logdet);
        let mut cache: BTreeMap<usize, (DMatrix<f64>, f64)> = BTreeMap::new();
        for (n, s) in &self.speakers {
            let (l_inv, l_logdet) = match cache.get(n) {
                Some(v) => v.clone(),
                None => {
                    let v = spd_inverse_logdet(&(&b_inv + &w_inv * *n as f64), "speaker posterior precision")?;
                    cache.insert(*n, v.clone());
                    v
                }
            };
            let f = &w_inv * (s - mean * *n as f64);
            ll += -0.5 * (b_logdet + l_logdet) + 0.5 * f.dot(&(&l_inv * &f));
        }
        Ok(ll)
    }
}

#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: TwoCovPlda,
    /// Training log-likelihood at initialization and after each iteration.
    pub log_likelihoods: Vec<f64>,
    pub warnings: Vec<String>,
}

/// EM training initialized at `mean = data mean`, `B = W = total / 2`.
///
/// With no within-speaker evidence (every speaker seen once) `B` takes the
/// full covariance and `W` is pinned to the floor. Degenerate data (zero
/// variance) is floored and reported in `warnings`.
pub fn fit_plda(x: &EmbeddingSet, iterations: usize) -> Result<PldaFit> {
    let stats = SpeakerStats::collect(x)?;
    if stats.speakers.len() < 2 {
        return Err(Error::Insufficient("PLDA needs at least 2 speakers".into()));
    }
    let d = stats.dim;
    let n = stats.total as f64;
    let mut warnings = Vec::new();

    let mean = &stats.sum / n;
    let total = stats.centered_scatter(&mean) / n;
    let scale = total.trace() / d as f64;
    let floor = COV_FLOOR * if scale > 0.0 { scale } else { 1.0 };
    if !(scale > 0.0) {
        warnings.push("embeddings have zero variance; covariances floored".to_string());
    }
    let (half, floored) = floor_eigenvalues(&(&total * 0.5), floor);
    if floored && scale > 0.0 {
        warnings.push("total covariance is rank-deficient; floored".to_string());
    }
    let mut mu = mean;
    let mut b = half.clone();
    let mut w = half;

    let mut history = vec![stats.log_likelihood(&mu, &b, &w)?];

    if iterations > 0 && stats.speakers.iter().all(|(c, _)| *c == 1) {
        warnings.push("no speaker has more than one utterance; within covariance pinned to floor".to_string());
        b = floor_eigenvalues(&total, floor).0;
        w = DMatrix::identity(d, d) * floor;
        history.push(stats.log_likelihood(&mu, &b, &w)?);
        return finish(mu, b, w, history, warnings);
    }

    for it in 0..iterations {
        let (b_inv, _) = spd_inverse_logdet(&b, "between covariance")?;
        let (w_inv, _) = spd_inverse_logdet(&w, "within covariance")?;
        let b_inv_mu = &b_inv * &mu;
        let mut cache: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut sum_y = DVector::zeros(d);
        let mut yy = DMatrix::zeros(d, d);
        let mut w_acc = stats.scatter.clone();
        let speakers = stats.speakers.len() as f64;
        for (count, s) in &stats.speakers {
            let c = *count as f64;
            let l_inv = match cache.get(count) {
                Some(m) => m.clone(),
                None => {
                    let m = spd_inverse_logdet(&(&b_inv + &w_inv * c), "speaker posterior precision")?.0;
                    cache.insert(*count, m.clone());
                    m
                }
            };
            let y = &l_inv * (&b_inv_mu + &w_inv * s);
            let second = &y * y.transpose() + &l_inv;
            sum_y += &y;
            yy += &second;
            w_acc -= &y * s.transpose() + s * y.transpose();
            w_acc += second * c;
        }
        mu = sum_y / speakers;
        b = sym(&(yy / speakers - &mu * mu.transpose()));
        w = sym(&(w_acc / n));
        let (bf, b_floored) = floor_eigenvalues(&b, floor);
        let (wf, w_floored) = floor_eigenvalues(&w, floor);
        if b_floored || w_floored {
            warnings.push(format!("iteration {it}: covariance eigenvalues floored"));
        }
        b = bf;
        w = wf;
        history.push(stats.log_likelihood(&mu, &b, &w)?);
    }
    finish(mu, b, w, history, warnings)
}

fn finish(
    mu: DVector<f64>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    log_likelihoods: Vec<f64>,
    warnings: Vec<String>,
) -> Result<PldaFit> {
    for msg in &warnings {
        log::warn!("plda: {msg}");
    }
    Ok(PldaFit {
        model: TwoCovPlda::new(mu, b, w)?,
        log_likelihoods,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, SeedTree};
    use approx::assert_relative_eq;

    fn scalar_model(b: f64, w: f64) -> TwoCovPlda {
        TwoCovPlda::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, w),
        )
        .unwrap()
    }

    /// Same/different likelihoods by quadrature over the 1-D latent variable.
    fn quadrature_llr(b: f64, w: f64, e: f64, t: f64) -> f64 {
        let pdf = |x: f64, var: f64| (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let (lo, hi, steps) = (-12.0 * b.sqrt(), 12.0 * b.sqrt(), 200_000);
        let h = (hi - lo) / steps as f64;
        let mut same = 0.0;
        for k in 0..=steps {
            let y = lo + k as f64 * h;
            let wgt = if k == 0 || k == steps { 0.5 } else { 1.0 };
            same += wgt * pdf(e - y, w) * pdf(t - y, w) * pdf(y, b);
        }
        same *= h;
        let diff = pdf(e, b + w) * pdf(t, b + w);
        (same / diff).ln()
    }

    #[test]
    fn scalar_llr_at_origin() {
        let m = scalar_model(1.0, 1.0);
        let s = m.score(&DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert_relative_eq!(s, 0.5 * (4.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_relative_eq!(s, 0.143_841_036_225_890_1, epsilon = 1e-12);
        assert!((quadrature_llr(1.0, 1.0, 0.0, 0.0) - s).abs() < 1e-8);
    }

    #[test]
    fn scalar_llr_matches_quadrature_off_origin() {
        let m = scalar_model(2.0, 0.5);
        for (e, t) in [(0.3, -0.4), (1.5, 1.2), (-2.0, 0.7)] {
            let s = m
                .score(&DVector::from_element(1, e), &DVector::from_element(1, t))
                .unwrap();
            assert!((quadrature_llr(2.0, 0.5, e, t) - s).abs() < 1e-7, "({e},{t})");
        }
    }

    #[test]
    fn vanishing_between_covariance_gives_zero_llr() {
        let m = scalar_model(1e-10, 1.0);
        for (e, t) in [(0.0, 0.0), (3.0, -2.0), (1.0, 1.0)] {
            let s = m
                .score(&DVector::from_element(1, e), &DVector::from_element(1, t))
                .unwrap();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn score_is_symmetric() {
        let mut rng = SeedTree::new(2).rng();
        let a = DMatrix::from_row_slice(3, 3, &normal_vec(&mut rng, 9));
        let b = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
        let m = TwoCovPlda::new(
            DVector::from_vec(vec![0.1, 0.2, -0.3]),
            b,
            DMatrix::identity(3, 3) * 0.7,
        )
        .unwrap();
        for _ in 0..20 {
            let e = DVector::from_vec(normal_vec(&mut rng, 3));
            let t = DVector::from_vec(normal_vec(&mut rng, 3));
            assert_eq!(m.score(&e, &t).unwrap(), m.score(&t, &e).unwrap());
        }
        assert!(m.score(&DVector::zeros(2), &DVector::zeros(3)).is_err());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut rng = SeedTree::new(3).rng();
        let labels: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let z = normal_vec(&mut rng, 40 * 2);
        let set = EmbeddingSet::labeled(DMatrix::from_row_slice(40, 2, &z), &labels).unwrap();
        let fit = fit_plda(&set, 0).unwrap();
        assert_eq!(fit.model.between, fit.model.within);
        assert_eq!(fit.log_likelihoods.len(), 1);
        let mean = set.matrix.row_mean().transpose();
        assert_relative_eq!(fit.model.mean, mean, epsilon = 1e-12);
    }

    #[test]
    fn single_utterance_speakers_put_everything_in_between() {
        let mut rng = SeedTree::new(4).rng();
        let labels: Vec<usize> = (0..50).collect();
        let z = normal_vec(&mut rng, 50 * 2);
        let set = EmbeddingSet::labeled(DMatrix::from_row_slice(50, 2, &z), &labels).unwrap();
        let fit = fit_plda(&set, 5).unwrap();
        assert!(!fit.warnings.is_empty());
        assert!(fit.model.within.trace() < 1e-8);
        assert!(fit.model.between.trace() > 1.0);
    }

    #[test]
    fn identical_embeddings_are_floored() {
        let labels: Vec<usize> = (0..20).map(|i| i / 2).collect();
        let set = EmbeddingSet::labeled(DMatrix::from_element(20, 3, 0.5), &labels).unwrap();
        let fit = fit_plda(&set, 3).unwrap();
        assert!(!fit.warnings.is_empty());
        let s = fit
            .model
            .score(&DVector::from_element(3, 0.5), &DVector::from_element(3, 0.5))
            .unwrap();
        assert!(s.is_finite());
    }
}
