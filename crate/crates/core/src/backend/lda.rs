//! Linear discriminant analysis via the generalized symmetric eigenproblem
//! `S_b w = lambda S_w w`, solved by Cholesky whitening of `S_w`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EmbeddingSet;
use crate::error::{Error, Result};

/// Relative ridge added to the within-class scatter.
pub const WITHIN_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Lda {
    /// `E x E'`; columns ordered by decreasing eigenvalue and scaled so that
    /// `w^T S_w w = 1`.
    pub projection: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

impl Lda {
    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.projection.nrows() {
            return Err(Error::shape("lda input", self.projection.nrows(), v.len()));
        }
        Ok(self.projection.tr_mul(v))
    }
}

/// Between- and within-class scatter, each normalized by the sample count.
pub(crate) fn scatter_matrices(x: &EmbeddingSet, groups: &[Vec<usize>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = x.dim();
    let n = x.len() as f64;
    let global = x.matrix.row_mean().transpose();
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for g in groups {
        let mut mean = DVector::zeros(d);
        for &i in g {
            mean += x.row(i);
        }
        mean /= g.len() as f64;
        let diff = &mean - &global;
        sb.ger(g.len() as f64 / n, &diff, &diff, 1.0);
        for &i in g {
            let r = x.row(i) - &mean;
            sw.ger(1.0 / n, &r, &r, 1.0);
        }
    }
    (sb, sw)
}

pub fn fit_lda(x: &EmbeddingSet, out_dim: usize) -> Result<Lda> {
    let groups = x.groups()?;
    let d = x.dim();
    if groups.len() < 2 {
        return Err(Error::Insufficient("LDA needs at least 2 speakers".into()));
    }
    if out_dim == 0 || out_dim > d.min(groups.len() - 1) {
        return Err(Error::Config(format!(
            "LDA output dim {out_dim} must be in 1..={} (min of input dim {d} and speakers - 1)",
            d.min(groups.len() - 1)
        )));
    }
    let (sb, mut sw) = scatter_matrices(x, &groups);
    let scale = sw.trace() / d as f64;
    let ridge = WITHIN_RIDGE
        * if scale > 0.0 {
            scale
        } else {
            (sb.trace() / d as f64).max(1.0)
        };
    for i in 0..d {
        sw[(i, i)] += ridge;
    }
    let chol = sw
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NonFinite("within-class scatter is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::NonFinite("within-class Cholesky factor".into()))?;
    let mut m = &l_inv * &sb * l_inv.transpose();
    m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut projection = DMatrix::zeros(d, out_dim);
    let mut eigenvalues = DVector::zeros(out_dim);
    for (col, &k) in order.iter().take(out_dim).enumerate() {
        let mut w = l_inv.tr_mul(&eig.eigenvectors.column(k).into_owned());
        // Sign convention: largest-magnitude entry positive.
        let pivot = w
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            w = -w;
        }
        projection.set_column(col, &w);
        eigenvalues[col] = eig.eigenvalues[k];
    }
    Ok(Lda {
        projection,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, permutation, SeedTree};
    use approx::assert_relative_eq;

    fn two_class_set(n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = SeedTree::new(seed).rng();
        let noise = normal_vec(&mut rng, 2 * n * 2);
        let mut labels = Vec::new();
        let m = DMatrix::from_fn(2 * n, 2, |i, j| {
            let c = i / n;
            let mean = if j == 0 {
                if c == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            };
            mean + 0.3 * noise[i * 2 + j]
        });
        for i in 0..2 * n {
            labels.push(i / n);
        }
        (m, labels)
    }

    #[test]
    fn two_class_direction_is_x_axis() {
        let (m, labels) = two_class_set(500, 1);
        let set = EmbeddingSet::labeled(m, &labels).unwrap();
        let lda = fit_lda(&set, 1).unwrap();
        let w = lda.projection.column(0).normalize();
        assert!(w[0].abs() > 0.99, "direction {w}");
    }

    #[test]
    fn projection_is_within_whitened() {
        let mut rng = SeedTree::new(4).rng();
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let z = normal_vec(&mut rng, 200 * 4);
        let m = DMatrix::from_fn(200, 4, |i, j| z[i * 4 + j] + labels[i] as f64 * (j as f64 + 1.0) * 0.2);
        let set = EmbeddingSet::labeled(m, &labels).unwrap();
        let lda = fit_lda(&set, 3).unwrap();
        let groups = set.groups().unwrap();
        let (_, sw) = scatter_matrices(&set, &groups);
        let g = lda.projection.transpose() * sw * &lda.projection;
        assert_relative_eq!(g, DMatrix::identity(3, 3), epsilon = 1e-4);
        assert!(lda.eigenvalues[0] >= lda.eigenvalues[1] && lda.eigenvalues[1] >= lda.eigenvalues[2]);
    }

    #[test]
    fn full_dimension_spans_space() {
        let mut rng = SeedTree::new(5).rng();
        let labels: Vec<usize> = (0..300).map(|i| i % 30).collect();
        let z = normal_vec(&mut rng, 300 * 3);
        let set = EmbeddingSet::labeled(DMatrix::from_row_slice(300, 3, &z), &labels).unwrap();
        let lda = fit_lda(&set, 3).unwrap();
        assert!(lda.projection.determinant().abs() > 1e-6);
    }

    #[test]
    fn out_dim_too_large() {
        let (m, labels) = two_class_set(10, 2);
        let set = EmbeddingSet::labeled(m, &labels).unwrap();
        assert!(matches!(fit_lda(&set, 2), Err(Error::Config(_))));
    }

    #[test]
    fn singular_within_scatter_is_regularized() {
        // One utterance per speaker: zero within-class scatter.
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
        let set = EmbeddingSet::labeled(m, &[0, 1, 2]).unwrap();
        let lda = fit_lda(&set, 2).unwrap();
        assert!(lda.projection.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let (m, labels) = two_class_set(100, 3);
        let true_ev = fit_lda(&EmbeddingSet::labeled(m.clone(), &labels).unwrap(), 1)
            .unwrap()
            .eigenvalues[0];
        let mut rng = SeedTree::new(9).rng();
        let mut perm_evs: Vec<f64> = (0..100)
            .map(|_| {
                let p = permutation(&mut rng, labels.len());
                let shuffled: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
                fit_lda(&EmbeddingSet::labeled(m.clone(), &shuffled).unwrap(), 1)
                    .unwrap()
                    .eigenvalues[0]
            })
            .collect();
        perm_evs.sort_by(f64::total_cmp);
        // Shuffled eigenvalues are tiny compared to the real separation.
        assert!(perm_evs[99] < 0.1 * true_ev, "{} vs {}", perm_evs[99], true_ev);
        assert!(perm_evs[49] < 0.05);
    }
}
