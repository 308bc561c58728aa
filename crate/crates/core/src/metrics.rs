//! Detection metrics: DET operating points, equal error rate, and
//! normalized minimum detection cost.
//!
//! A trial is accepted when its score is `>=` the threshold.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> Self {
        Self {
            target_scores,
            nontarget_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target_scores.is_empty() {
            return Err(Error::Empty("no target scores"));
        }
        if self.nontarget_scores.is_empty() {
            return Err(Error::Empty("no nontarget scores"));
        }
        if self
            .target_scores
            .iter()
            .chain(&self.nontarget_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::NonFinite("score set".into()));
        }
        Ok(())
    }
}

/// One point of the DET staircase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Threshold; `+inf` for the reject-all point.
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score plus `+inf`, in increasing
/// threshold order (`p_miss` nondecreasing, `p_fa` nonincreasing).
pub fn det_points(s: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    s.validate()?;
    let nt = s.target_scores.len() as f64;
    let nn = s.nontarget_scores.len() as f64;
    // (score, is_target), sorted ascending.
    let mut all: Vec<(f64, bool)> = s
        .target_scores
        .iter()
        .map(|&v| (v, true))
        .chain(s.nontarget_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push(OperatingPoint {
            threshold: t,
            p_miss: tar_below as f64 / nt,
            p_fa: (nn - non_below as f64) / nn,
        });
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Crossing of miss and false-alarm rates, interpolated linearly between the
/// two staircase points that bracket it.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let idx = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf point always has p_miss >= p_fa");
    if idx == 0 {
        return points[0].p_miss;
    }
    let (a, b) = (points[idx - 1], points[idx]);
    let gap_a = a.p_fa - a.p_miss;
    let gap_b = b.p_fa - b.p_miss;
    let alpha = gap_a / (gap_a - gap_b);
    a.p_miss + alpha * (b.p_miss - a.p_miss)
}

pub fn eer(s: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&det_points(s)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub name: String,
}

impl DcfParams {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        if !(p_target > 0.0 && p_target < 1.0) {
            return Err(Error::Config(format!("p_target {p_target} outside (0, 1)")));
        }
        if !(c_miss > 0.0 && c_fa > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        Ok(Self {
            p_target,
            c_miss,
            c_fa,
            name: format!("p{p_target}"),
        })
    }

    fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa) / self.normalizer()
    }
}

/// Minimum normalized cost over the staircase, including the accept-all and
/// reject-all points, so the result lies in `[0, 1]`.
pub fn min_dcf_from_points(points: &[OperatingPoint], p: &DcfParams) -> f64 {
    points
        .iter()
        .map(|pt| p.cost(pt.p_miss, pt.p_fa))
        .fold(f64::INFINITY, f64::min)
}

pub fn min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<f64> {
    Ok(min_dcf_from_points(&det_points(s)?, p))
}

/// Named cost presets: one or more operating points whose minimum costs are
/// averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricPreset {
    /// `p_target = 0.01`, unit costs.
    VoxCeleb,
    /// Mean of the minimum costs at `p_target` 0.01 and 0.005, unit costs.
    Sre,
}

impl MetricPreset {
    pub fn operating_points(self) -> Vec<DcfParams> {
        let ps: &[f64] = match self {
            MetricPreset::VoxCeleb => &[0.01],
            MetricPreset::Sre => &[0.01, 0.005],
        };
        ps.iter()
            .map(|&p| DcfParams::new(p, 1.0, 1.0).expect("valid preset"))
            .collect()
    }

    pub fn min_cost(self, s: &ScoreSet) -> Result<f64> {
        let points = det_points(s)?;
        let ops = self.operating_points();
        Ok(ops.iter().map(|p| min_dcf_from_points(&points, p)).sum::<f64>() / ops.len() as f64)
    }
}

impl std::str::FromStr for MetricPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxceleb" => Ok(MetricPreset::VoxCeleb),
            "sre" => Ok(MetricPreset::Sre),
            other => Err(Error::Config(format!(
                "unknown metric preset `{other}` (voxceleb | sre)"
            ))),
        }
    }
}

impl std::fmt::Display for MetricPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricPreset::VoxCeleb => "voxceleb",
            MetricPreset::Sre => "sre",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet::new(t.to_vec(), n.to_vec())
    }

    #[test]
    fn eer_examples() {
        let s = set(&[0.9, 0.8, 0.7], &[0.75, 0.3, 0.2]);
        assert!((eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(eer(&set(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(eer(&set(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap(), 0.5);
    }

    #[test]
    fn inverted_scores_give_full_error() {
        let e = eer(&set(&[0.0, 1.0], &[2.0, 3.0])).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(eer(&set(&[], &[1.0])).is_err());
        assert!(min_dcf(&set(&[1.0], &[]), &DcfParams::new(0.5, 1.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::new(0.5, 1.0, 1.0).unwrap();
        assert_eq!(min_dcf(&set(&[2.0, 1.0], &[0.0, -1.0]), &p).unwrap(), 0.0);
        let same = set(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]);
        for p_t in [0.01, 0.3, 0.5, 0.9] {
            let p = DcfParams::new(p_t, 1.0, 2.0).unwrap();
            assert!((min_dcf(&same, &p).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(DcfParams::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn det_examples() {
        let pts = det_points(&set(&[1.0], &[0.0])).unwrap();
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.p_miss, p.p_fa)).collect();
        assert_eq!(pairs, vec![(0.0, 1.0), (0.0, 0.0), (1.0, 0.0)]);
        let pts = det_points(&set(&[0.4, 0.4], &[0.4])).unwrap();
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.p_miss, p.p_fa)).collect();
        assert_eq!(pairs, vec![(0.0, 1.0), (1.0, 0.0)]);
    }

    #[test]
    fn duplicated_entries_keep_curve() {
        let a = set(&[0.3, 0.9, 0.5], &[0.1, 0.6]);
        let b = set(&[0.3, 0.9, 0.5, 0.3, 0.9, 0.5], &[0.1, 0.6, 0.1, 0.6]);
        assert_eq!(det_points(&a).unwrap(), det_points(&b).unwrap());
    }

    #[test]
    fn presets() {
        let s = set(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(MetricPreset::Sre.min_cost(&s).unwrap(), 0.0);
        assert_eq!("voxceleb".parse::<MetricPreset>().unwrap(), MetricPreset::VoxCeleb);
    }
}
