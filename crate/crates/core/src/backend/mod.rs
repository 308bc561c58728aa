//! Embedding preprocessing and scoring backends.
//!
//! The preprocessing chain is applied in a fixed order: centering, length
//! normalization, then an optional LDA projection (optionally followed by a
//! second length normalization). Scoring is either cosine or two-covariance
//! PLDA, with optional adaptive score normalization against a cohort.

mod lda;
mod plda;
mod snorm;

pub use lda::{fit_lda, Lda};
pub use plda::{fit_plda, PldaFit, TwoCovPlda};
pub use snorm::{adaptive_snorm, CohortScores};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Embeddings in rows, with utterance ids and optional speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub speakers: Vec<Option<String>>,
    pub matrix: DMatrix<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, speakers: Vec<Option<String>>, matrix: DMatrix<f64>) -> Result<Self> {
        if ids.len() != matrix.nrows() || speakers.len() != matrix.nrows() {
            return Err(Error::shape("embedding set rows", matrix.nrows(), ids.len()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding set".into()));
        }
        Ok(Self { ids, speakers, matrix })
    }

    /// Unlabeled set with generated ids.
    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("embedding rows", d, "ragged rows"));
        }
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        Self::new(ids, vec![None; rows.len()], matrix)
    }

    pub fn labeled(matrix: DMatrix<f64>, labels: &[usize]) -> Result<Self> {
        let ids = (0..matrix.nrows()).map(|i| format!("e{i}")).collect();
        let speakers = labels.iter().map(|l| Some(format!("s{l}"))).collect();
        Self::new(ids, speakers, matrix)
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.matrix.row(i).transpose()
    }

    /// Row indices grouped by speaker, in sorted speaker order.
    pub fn groups(&self) -> Result<Vec<Vec<usize>>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.speakers.iter().enumerate() {
            let s = s
                .as_deref()
                .ok_or_else(|| Error::Config(format!("utterance `{}` has no speaker label", self.ids[i])))?;
            map.entry(s).or_default().push(i);
        }
        Ok(map.into_values().collect())
    }

    /// Copy with every row transformed by `f`.
    pub fn map_rows(&self, f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>) -> Result<Self> {
        let rows: Vec<DVector<f64>> = (0..self.len()).map(|i| f(&self.row(i))).collect::<Result<_>>()?;
        let d = rows.first().map_or(0, |r| r.len());
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(self.ids.clone(), self.speakers.clone(), matrix)
    }
}

/// Mean embedding of the set.
pub fn fit_center(x: &EmbeddingSet) -> Result<DVector<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("centering needs at least one embedding"));
    }
    Ok(x.matrix.row_mean().transpose())
}

pub fn apply_center(v: &DVector<f64>, mean: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != mean.len() {
        return Err(Error::shape("centering", mean.len(), v.len()));
    }
    Ok(v - mean)
}

pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Domain("cannot length-normalize a zero vector".into()));
    }
    Ok(v / n)
}

pub fn cosine_score(e: &DVector<f64>, t: &DVector<f64>) -> Result<f64> {
    if e.len() != t.len() {
        return Err(Error::shape("cosine score", e.len(), t.len()));
    }
    let (ne, nt) = (e.norm(), t.norm());
    if !(ne > 0.0 && nt > 0.0) {
        return Err(Error::Domain("cosine score of a zero vector".into()));
    }
    Ok((e.dot(t) / (ne * nt)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of several enrollment embeddings.
pub fn average_enrollment(embeddings: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = embeddings.first().ok_or(Error::Empty("enrollment list"))?;
    let mut acc = DVector::zeros(first.len());
    for e in embeddings {
        if e.len() != first.len() {
            return Err(Error::shape("enrollment embedding", first.len(), e.len()));
        }
        acc += e;
    }
    Ok(acc / embeddings.len() as f64)
}

/// Fitted center / length-norm / LDA transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessChain {
    pub mean: DVector<f64>,
    pub length_norm: bool,
    pub lda: Option<Lda>,
    /// Second length normalization after the LDA projection.
    pub post_lda_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub length_norm: bool,
    /// Output dimension of LDA; `None` skips the projection.
    pub lda_dim: Option<usize>,
    pub post_lda_norm: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            length_norm: true,
            lda_dim: None,
            post_lda_norm: false,
        }
    }
}

impl PreprocessChain {
    pub fn fit(x: &EmbeddingSet, cfg: &PreprocessConfig) -> Result<Self> {
        let mean = fit_center(x)?;
        let mut chain = Self {
            mean,
            length_norm: cfg.length_norm,
            lda: None,
            post_lda_norm: false,
        };
        if let Some(dim) = cfg.lda_dim {
            let staged = x.map_rows(|v| chain.apply(v))?;
            chain.lda = Some(fit_lda(&staged, dim)?);
            chain.post_lda_norm = cfg.post_lda_norm;
        }
        Ok(chain)
    }

    pub fn output_dim(&self) -> usize {
        self.lda.as_ref().map_or(self.mean.len(), Lda::output_dim)
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = apply_center(v, &self.mean)?;
        if self.length_norm {
            out = length_normalize(&out)?;
        }
        if let Some(lda) = &self.lda {
            out = lda.project(&out)?;
            if self.post_lda_norm {
                out = length_normalize(&out)?;
            }
        }
        Ok(out)
    }

    pub fn apply_set(&self, x: &EmbeddingSet) -> Result<EmbeddingSet> {
        x.map_rows(|v| self.apply(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Cosine,
    Plda(TwoCovPlda),
}

impl Scorer {
    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        match self {
            Scorer::Cosine => cosine_score(enroll, test),
            Scorer::Plda(m) => m.score(enroll, test),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Cosine,
    Plda,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(BackendKind::Cosine),
            "plda" => Ok(BackendKind::Plda),
            other => Err(Error::Config(format!("unknown backend `{other}` (cosine | plda)"))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Cosine => "cosine",
            BackendKind::Plda => "plda",
        })
    }
}

/// Preprocessing plus scorer, both fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendChain {
    pub preprocess: PreprocessChain,
    pub scorer: Scorer,
    pub warnings: Vec<String>,
}

impl BackendChain {
    pub fn fit(
        train: &EmbeddingSet,
        kind: BackendKind,
        cfg: &PreprocessConfig,
        plda_iterations: usize,
    ) -> Result<Self> {
        let preprocess = PreprocessChain::fit(train, cfg)?;
        let mut warnings = Vec::new();
        let scorer = match kind {
            BackendKind::Cosine => Scorer::Cosine,
            BackendKind::Plda => {
                let projected = preprocess.apply_set(train)?;
                let fit = fit_plda(&projected, plda_iterations)?;
                warnings.extend(fit.warnings);
                Scorer::Plda(fit.model)
            }
        };
        Ok(Self {
            preprocess,
            scorer,
            warnings,
        })
    }

    /// Scores raw (unprocessed) embeddings.
    pub fn score_raw(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        self.scorer
            .score(&self.preprocess.apply(enroll)?, &self.preprocess.apply(test)?)
    }
}
