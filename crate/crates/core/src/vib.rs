//! Stochastic embedding head: diagonal-Gaussian posterior over embeddings,
//! reparametrized sampling, and the KL divergence to a standard-normal prior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Dense, PooledVector};
use crate::params::{BlockMut, BlockRef, Parameterized};
use crate::rng::{normal_vec, SeedTree};

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Positivity link applied to the sigma pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaLink {
    #[default]
    Softplus,
    Exp,
}

impl SigmaLink {
    fn apply(self, x: f64) -> f64 {
        match self {
            SigmaLink::Softplus => softplus(x),
            SigmaLink::Exp => x.exp(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            SigmaLink::Softplus => sigmoid(x),
            SigmaLink::Exp => x.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VibHeadParams {
    pub mu_layer: Dense,
    pub sigma_layer: Dense,
    pub link: SigmaLink,
}

impl VibHeadParams {
    pub fn zeros(pooled_dim: usize, embed_dim: usize) -> Self {
        Self {
            mu_layer: Dense::zeros(pooled_dim, embed_dim),
            sigma_layer: Dense::zeros(pooled_dim, embed_dim),
            link: SigmaLink::Softplus,
        }
    }

    pub fn random(pooled_dim: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mu_layer = Dense::random(pooled_dim, embed_dim, 1.0, rng);
        // Small sigma weights so the initial posterior width is driven by the bias.
        let mut sigma_layer = Dense::random(pooled_dim, embed_dim, 0.1, rng);
        sigma_layer.bias.fill(0.0);
        Self {
            mu_layer,
            sigma_layer,
            link: SigmaLink::Softplus,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.mu_layer.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.mu_layer.input_dim()
    }
}

impl Parameterized for VibHeadParams {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut out = Vec::new();
        self.mu_layer.push_blocks("head.mu", &mut out);
        self.sigma_layer.push_blocks("head.sigma", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = Vec::new();
        self.mu_layer.push_blocks_mut("head.mu", &mut out);
        self.sigma_layer.push_blocks_mut("head.sigma", &mut out);
        out
    }
}

/// Parameters of `N(mu, diag(sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticEmbedding {
    pub mu: DVector<f64>,
    pub sigma: DVector<f64>,
}

impl StochasticEmbedding {
    pub fn new(mu: DVector<f64>, sigma: DVector<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("embedding sigma", mu.len(), sigma.len()));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stochastic embedding".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Head output plus the sigma pre-activation needed for backprop.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub embedding: StochasticEmbedding,
    pub sigma_pre: DVector<f64>,
}

pub fn head_forward(pooled: &PooledVector, params: &VibHeadParams) -> Result<HeadOutput> {
    params.mu_layer.check_input(pooled.0.len(), "vib head input")?;
    params.sigma_layer.check_input(pooled.0.len(), "vib head input")?;
    if params.sigma_layer.output_dim() != params.embed_dim() {
        return Err(Error::Config("mu and sigma layers disagree on embedding dim".into()));
    }
    let mu = params.mu_layer.forward(&pooled.0);
    let sigma_pre = params.sigma_layer.forward(&pooled.0);
    let sigma = sigma_pre.map(|v| params.link.apply(v));
    if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vib head output".into()));
    }
    Ok(HeadOutput {
        embedding: StochasticEmbedding { mu, sigma },
        sigma_pre,
    })
}

/// Backpropagates gradients w.r.t. `mu` and `sigma` into head parameters and
/// the pooled input. Returns `(parameter gradient, d loss / d pooled)`.
pub fn head_backward(
    pooled: &PooledVector,
    params: &VibHeadParams,
    out: &HeadOutput,
    grad_mu: &DVector<f64>,
    grad_sigma: Option<&DVector<f64>>,
) -> (VibHeadParams, DVector<f64>) {
    let mut g = VibHeadParams::zeros(params.input_dim(), params.embed_dim());
    g.link = params.link;
    g.mu_layer.weight = grad_mu * pooled.0.transpose();
    g.mu_layer.bias = grad_mu.clone();
    let mut grad_in = params.mu_layer.weight.tr_mul(grad_mu);
    if let Some(gs) = grad_sigma {
        let g_pre = gs.zip_map(&out.sigma_pre, |g, x| g * params.link.derivative(x));
        g.sigma_layer.weight = &g_pre * pooled.0.transpose();
        grad_in += params.sigma_layer.weight.tr_mul(&g_pre);
        g.sigma_layer.bias = g_pre;
    }
    (g, grad_in)
}

/// `J x E` standard-normal draws used for reparametrized sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    pub values: DMatrix<f64>,
    /// Key of the stream the block was drawn from; `None` for hand-built blocks.
    pub seed_key: Option<u64>,
}

impl NoiseBlock {
    pub fn generate(tree: SeedTree, samples: usize, dim: usize) -> Self {
        let mut rng = tree.rng();
        let v = normal_vec(&mut rng, samples * dim);
        Self {
            values: DMatrix::from_row_slice(samples, dim, &v),
            seed_key: Some(tree.key()),
        }
    }

    pub fn zeros(samples: usize, dim: usize) -> Self {
        Self {
            values: DMatrix::zeros(samples, dim),
            seed_key: None,
        }
    }

    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        Self { values, seed_key: None }
    }

    pub fn num_samples(&self) -> usize {
        self.values.nrows()
    }
}

/// Reparametrized samples `z_j = sigma * e_j + mu`, one per row.
pub fn sample(emb: &StochasticEmbedding, noise: &NoiseBlock) -> Result<DMatrix<f64>> {
    if noise.values.ncols() != emb.dim() {
        return Err(Error::shape("noise block width", emb.dim(), noise.values.ncols()));
    }
    let mut z = noise.values.clone();
    for mut row in z.row_iter_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = emb.sigma[d] * *v + emb.mu[d];
        }
    }
    Ok(z)
}

/// `KL(N(mu, diag sigma^2) || N(0, I))`.
pub fn kl_to_standard_normal(emb: &StochasticEmbedding) -> Result<f64> {
    if emb.sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("sigma must be strictly positive".into()));
    }
    Ok(0.5
        * emb
            .mu
            .iter()
            .zip(emb.sigma.iter())
            .map(|(m, s)| m * m + s * s - 1.0 - 2.0 * s.ln())
            .sum::<f64>())
}

/// Gradients of the KL term w.r.t. `(mu, sigma)`.
pub fn kl_gradient(emb: &StochasticEmbedding) -> (DVector<f64>, DVector<f64>) {
    (emb.mu.clone(), emb.sigma.map(|s| s - 1.0 / s))
}
