//! Training objectives: softmax cross-entropy, additive angular margin, and
//! the Monte-Carlo variational information bottleneck loss, together with the
//! warmup/exponential-ramp schedule used for the margin and for beta.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{matrix_mut, matrix_ref, vector_mut, vector_ref, BlockMut, BlockRef, Parameterized};
use crate::rng::normal_vec;
use crate::vib::{kl_gradient, kl_to_standard_normal, sample, NoiseBlock, StochasticEmbedding};

/// Scale used by angular (length-normalized) logits unless configured.
pub const DEFAULT_SCALE: f64 = 30.0;

/// Speaker prototypes mapping an embedding to per-class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `K x E`, one row per training speaker.
    pub prototypes: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub scale: f64,
    pub length_normalize: bool,
}

impl ClassifierHead {
    pub fn affine(prototypes: DMatrix<f64>, bias: DVector<f64>) -> Self {
        Self {
            prototypes,
            bias: Some(bias),
            scale: 1.0,
            length_normalize: false,
        }
    }

    pub fn angular(prototypes: DMatrix<f64>, scale: f64) -> Self {
        Self {
            prototypes,
            bias: None,
            scale,
            length_normalize: true,
        }
    }

    pub fn random(classes: usize, dim: usize, length_normalize: bool, scale: f64, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let w = normal_vec(rng, classes * dim);
        let prototypes = DMatrix::from_row_slice(classes, dim, &w) * std;
        if length_normalize {
            Self::angular(prototypes, scale)
        } else {
            Self::affine(prototypes, DVector::zeros(classes))
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.num_classes() {
                return Err(Error::shape("classifier bias", self.num_classes(), b.len()));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("classifier scale must be positive".into()));
        }
        Ok(())
    }

    /// Logits without any margin: affine `W z + b`, or `s cos(theta_k)` when
    /// length-normalized.
    pub fn logits(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if self.length_normalize {
            let geo = AngularGeometry::new(z, &self.prototypes)?;
            Ok(geo.cos.map(|c| self.scale * c))
        } else {
            self.check_dim(z)?;
            let mut l = &self.prototypes * z;
            if let Some(b) = &self.bias {
                l += b;
            }
            Ok(l)
        }
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::shape("embedding dimension", self.dim(), z.len()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }
}

impl Parameterized for ClassifierHead {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut out = vec![matrix_ref("classifier.prototypes".into(), &self.prototypes)];
        if let Some(b) = &self.bias {
            out.push(vector_ref("classifier.bias".into(), b));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = vec![matrix_mut("classifier.prototypes".into(), &mut self.prototypes)];
        if let Some(b) = &mut self.bias {
            out.push(vector_mut("classifier.bias".into(), b));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl AamConfig {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!("AAM margin {margin} outside [0, pi/2)")));
        }
        if !(scale > 0.0) {
            return Err(Error::Config("AAM scale must be positive".into()));
        }
        Ok(Self { margin, scale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VibConfig {
    pub beta: f64,
    pub num_samples: usize,
    pub length_normalize: bool,
}

impl VibConfig {
    pub fn new(beta: f64, num_samples: usize, length_normalize: bool) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if num_samples == 0 {
            return Err(Error::Config("number of samples J must be >= 1".into()));
        }
        Ok(Self {
            beta,
            num_samples,
            length_normalize,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ce,
    Aam,
    Vib,
    VibLn,
}

impl LossKind {
    pub fn is_vib(self) -> bool {
        matches!(self, LossKind::Vib | LossKind::VibLn)
    }

    /// Whether embeddings and prototypes are unit-normalized in the logits.
    pub fn is_angular(self) -> bool {
        matches!(self, LossKind::Aam | LossKind::VibLn)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "aam" => Ok(LossKind::Aam),
            "vib" => Ok(LossKind::Vib),
            "vib_ln" => Ok(LossKind::VibLn),
            other => Err(Error::Config(format!(
                "unknown loss kind `{other}` (expected ce | aam | vib | vib_ln)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Aam => "aam",
            LossKind::Vib => "vib",
            LossKind::VibLn => "vib_ln",
        })
    }
}

/// Zero during warmup, then an exponential ramp to `final_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampSchedule {
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    pub final_value: f64,
    pub ramp_floor_ratio: f64,
}

impl RampSchedule {
    pub fn new(final_value: f64) -> Self {
        Self {
            final_value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_value >= 0.0) {
            return Err(Error::Config("schedule final value must be >= 0".into()));
        }
        if !(self.ramp_floor_ratio > 0.0 && self.ramp_floor_ratio < 1.0) {
            return Err(Error::Config("ramp floor ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn value(&self, epoch: usize) -> f64 {
        schedule_value(epoch, self)
    }
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            ramp_epochs: 20,
            final_value: 0.0,
            ramp_floor_ratio: 1e-3,
        }
    }
}

pub fn schedule_value(epoch: usize, sched: &RampSchedule) -> f64 {
    if epoch < sched.warmup_epochs {
        return 0.0;
    }
    let into = epoch - sched.warmup_epochs;
    if into >= sched.ramp_epochs {
        return sched.final_value;
    }
    let progress = into as f64 / sched.ramp_epochs as f64;
    sched.final_value * (sched.ramp_floor_ratio.ln() * (1.0 - progress)).exp()
}

fn check_target(target: usize, classes: usize) -> Result<()> {
    if target >= classes {
        return Err(Error::Domain(format!(
            "target class {target} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let max = logits.max();
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `logsumexp(logits) - logits[target]`.
pub fn softmax_ce(logits: &DVector<f64>, target: usize) -> Result<f64> {
    check_target(target, logits.len())?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Cross-entropy together with its gradient `softmax(logits) - onehot`.
pub fn softmax_ce_grad(logits: &DVector<f64>, target: usize) -> Result<(f64, DVector<f64>)> {
    let loss = softmax_ce(logits, target)?;
    let lse = log_sum_exp(logits);
    let mut g = logits.map(|v| (v - lse).exp());
    g[target] -= 1.0;
    Ok((loss, g))
}

/// Cosines between an embedding and every prototype row.
struct AngularGeometry {
    z_hat: DVector<f64>,
    z_norm: f64,
    p_hat: DMatrix<f64>,
    p_norm: DVector<f64>,
    /// Clamped to `[-1, 1]`.
    cos: DVector<f64>,
    /// Whether the raw cosine was inside `[-1, 1]` (gradient passes).
    live: Vec<bool>,
}

impl AngularGeometry {
    fn new(z: &DVector<f64>, prototypes: &DMatrix<f64>) -> Result<Self> {
        if z.len() != prototypes.ncols() {
            return Err(Error::shape("embedding dimension", prototypes.ncols(), z.len()));
        }
        let z_norm = z.norm();
        if !(z_norm > 0.0) {
            return Err(Error::Domain("zero-norm embedding in angular logits".into()));
        }
        let z_hat = z / z_norm;
        let mut p_hat = prototypes.clone();
        let mut p_norm = DVector::zeros(prototypes.nrows());
        for (k, mut row) in p_hat.row_iter_mut().enumerate() {
            let n = row.norm();
            if !(n > 0.0) {
                return Err(Error::Domain(format!("zero-norm prototype row {k}")));
            }
            row /= n;
            p_norm[k] = n;
        }
        let raw = &p_hat * &z_hat;
        let live = raw.iter().map(|c| (-1.0..=1.0).contains(c)).collect();
        let cos = raw.map(|c| c.clamp(-1.0, 1.0));
        Ok(Self {
            z_hat,
            z_norm,
            p_hat,
            p_norm,
            cos,
            live,
        })
    }

    /// Chain `d loss / d cos_k` back to the embedding and the prototype rows.
    fn backward(&self, grad_cos: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut grad_z = DVector::zeros(self.z_hat.len());
        let mut grad_p = DMatrix::zeros(self.p_hat.nrows(), self.p_hat.ncols());
        for k in 0..self.p_hat.nrows() {
            let g = grad_cos[k];
            if g == 0.0 || !self.live[k] {
                continue;
            }
            let c = self.cos[k];
            let p = self.p_hat.row(k).transpose();
            grad_z.axpy(g / self.z_norm, &(&p - &self.z_hat * c), 1.0);
            let gp = (&self.z_hat - &p * c) * (g / self.p_norm[k]);
            grad_p.row_mut(k).copy_from(&gp.transpose());
        }
        (grad_z, grad_p)
    }
}

/// `s cos(theta + m)` for the target cosine `c`, with its derivative in `c`.
///
/// For `theta + m > pi` the modified logit falls back to `s (c - m sin m)`,
/// floored at `-s`, which keeps it monotone in `c` and inside `[-s, s cos m]`.
fn margin_target(c: f64, margin: f64, scale: f64) -> (f64, f64) {
    let (sm, cm) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();
    if c < threshold {
        let v = c - margin * sm;
        if v < -1.0 {
            (-scale, 0.0)
        } else {
            (scale * v, scale)
        }
    } else {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        let value = scale * (c * cm - sin * sm);
        let deriv = if sin > 1e-12 {
            scale * (cm + c * sm / sin)
        } else {
            scale * cm
        };
        (value, deriv)
    }
}

/// Additive-angular-margin logits: `s cos(theta_k + m [k == target])`.
pub fn aam_logits(z: &DVector<f64>, head: &ClassifierHead, target: usize, cfg: &AamConfig) -> Result<DVector<f64>> {
    check_target(target, head.num_classes())?;
    let geo = AngularGeometry::new(z, &head.prototypes)?;
    let mut logits = geo.cos.map(|c| cfg.scale * c);
    logits[target] = margin_target(geo.cos[target], cfg.margin, cfg.scale).0;
    Ok(logits)
}

/// Loss value and gradients for one example.
#[derive(Debug, Clone)]
pub struct ExampleLoss {
    pub loss: f64,
    /// Classification term (mean over samples for VIB).
    pub ce: f64,
    /// KL term before the beta weight; zero for deterministic losses.
    pub kl: f64,
    pub grad_mu: DVector<f64>,
    /// Present only for stochastic losses.
    pub grad_sigma: Option<DVector<f64>>,
    pub grad_head: ClassifierHead,
}

enum LogitRule {
    Affine,
    Angular { scale: f64, margin: f64 },
}

/// CE through the given logit rule at a single point `z`, with gradients
/// w.r.t. `z` accumulated into `grad_z` and head gradients into `grad_head`.
fn ce_point(
    z: &DVector<f64>,
    head: &ClassifierHead,
    target: usize,
    rule: &LogitRule,
    weight: f64,
    grad_z: &mut DVector<f64>,
    grad_head: &mut ClassifierHead,
) -> Result<f64> {
    match *rule {
        LogitRule::Affine => {
            let logits = head.logits(z)?;
            let (loss, g) = softmax_ce_grad(&logits, target)?;
            grad_z.gemv_tr(weight, &head.prototypes, &g, 1.0);
            grad_head.prototypes.ger(weight, &g, z, 1.0);
            if let Some(b) = &mut grad_head.bias {
                b.axpy(weight, &g, 1.0);
            }
            Ok(loss)
        }
        LogitRule::Angular { scale, margin } => {
            let geo = AngularGeometry::new(z, &head.prototypes)?;
            let mut logits = geo.cos.map(|c| scale * c);
            let (t_value, t_deriv) = margin_target(geo.cos[target], margin, scale);
            logits[target] = t_value;
            let (loss, g) = softmax_ce_grad(&logits, target)?;
            let mut grad_cos = g * scale;
            grad_cos[target] = (grad_cos[target] / scale) * t_deriv;
            grad_cos *= weight;
            let (gz, gp) = geo.backward(&grad_cos);
            *grad_z += gz;
            grad_head.prototypes += gp;
            Ok(loss)
        }
    }
}

/// Deterministic loss at `z = mu`: plain CE (affine logits) or AAM.
pub fn deterministic_loss(
    mu: &DVector<f64>,
    head: &ClassifierHead,
    target: usize,
    aam: Option<&AamConfig>,
) -> Result<ExampleLoss> {
    head.validate()?;
    check_target(target, head.num_classes())?;
    let rule = match aam {
        Some(cfg) => LogitRule::Angular {
            scale: cfg.scale,
            margin: cfg.margin,
        },
        None if head.length_normalize => LogitRule::Angular {
            scale: head.scale,
            margin: 0.0,
        },
        None => LogitRule::Affine,
    };
    let mut grad_mu = DVector::zeros(mu.len());
    let mut grad_head = head.zeros_like();
    let ce = ce_point(mu, head, target, &rule, 1.0, &mut grad_mu, &mut grad_head)?;
    Ok(ExampleLoss {
        loss: ce,
        ce,
        kl: 0.0,
        grad_mu,
        grad_sigma: None,
        grad_head,
    })
}

/// Monte-Carlo VIB loss with gradients w.r.t. `(mu, sigma)` and the head:
/// `(1/J) sum_j CE(logits(z_j), y) + beta KL`.
pub fn vib_loss_grad(
    emb: &StochasticEmbedding,
    head: &ClassifierHead,
    target: usize,
    cfg: &VibConfig,
    noise: &NoiseBlock,
) -> Result<ExampleLoss> {
    head.validate()?;
    check_target(target, head.num_classes())?;
    if noise.num_samples() != cfg.num_samples {
        return Err(Error::shape("noise samples J", cfg.num_samples, noise.num_samples()));
    }
    let rule = if cfg.length_normalize {
        LogitRule::Angular {
            scale: head.scale,
            margin: 0.0,
        }
    } else {
        LogitRule::Affine
    };
    let z = sample(emb, noise)?;
    let j = cfg.num_samples as f64;
    let mut grad_head = head.zeros_like();
    let mut grad_mu = DVector::zeros(emb.dim());
    let mut grad_sigma = DVector::zeros(emb.dim());
    let mut ce = 0.0;
    for (row, e_row) in z.row_iter().zip(noise.values.row_iter()) {
        let zj = row.transpose();
        let mut gz = DVector::zeros(emb.dim());
        ce += ce_point(&zj, head, target, &rule, 1.0 / j, &mut gz, &mut grad_head)?;
        grad_mu += &gz;
        grad_sigma += gz.component_mul(&e_row.transpose());
    }
    ce /= j;
    let kl = kl_to_standard_normal(emb)?;
    if cfg.beta != 0.0 {
        let (kl_mu, kl_sigma) = kl_gradient(emb);
        grad_mu.axpy(cfg.beta, &kl_mu, 1.0);
        grad_sigma.axpy(cfg.beta, &kl_sigma, 1.0);
    }
    Ok(ExampleLoss {
        loss: ce + cfg.beta * kl,
        ce,
        kl,
        grad_mu,
        grad_sigma: Some(grad_sigma),
        grad_head,
    })
}

pub fn vib_loss(
    emb: &StochasticEmbedding,
    head: &ClassifierHead,
    target: usize,
    cfg: &VibConfig,
    noise: &NoiseBlock,
) -> Result<f64> {
    vib_loss_grad(emb, head, target, cfg, noise).map(|l| l.loss)
}
