//! Frame-level dense encoder with statistics pooling.
//!
//! Each frame is passed through a stack of dense layers with a shared
//! elementwise activation; the resulting `T x F` matrix is pooled into the
//! concatenation of per-dimension means and population standard deviations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{matrix_mut, matrix_ref, vector_mut, vector_ref, BlockMut, BlockRef, Parameterized};
use crate::rng::normal_vec;

/// Lower clamp for pooled standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// One utterance worth of frame-level features, frames in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    pub frames: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, speaker_id: Option<String>, frames: DMatrix<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Empty("feature matrix needs T >= 1 and D >= 1"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            speaker_id,
            frames,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("feature rows", d, "ragged rows"));
        }
        let frames = DMatrix::from_fn(t, d, |i, j| rows[i][j]);
        Self::new("utt", None, frames)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Contiguous window of `len` frames starting at `start`.
    pub fn crop(&self, start: usize, len: usize) -> Result<FeatureMatrix> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::shape(
                "crop window",
                format!("start + len <= {}", self.num_frames()),
                format!("{start} + {len}"),
            ));
        }
        Ok(FeatureMatrix {
            utterance_id: self.utterance_id.clone(),
            speaker_id: self.speaker_id.clone(),
            frames: self.frames.rows(start, len).into_owned(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, a: &mut DMatrix<f64>) {
        if let Activation::Tanh = self {
            a.apply(|v| *v = v.tanh());
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Linear => 1.0,
        }
    }
}

/// Affine map `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// Gaussian init with variance `gain^2 / input`, zero bias.
    pub fn random(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (input as f64).sqrt();
        let w = normal_vec(rng, input * output);
        Self {
            weight: DMatrix::from_iterator(output, input, w.into_iter().map(|v| v * std)),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }

    /// Row-batched forward: `X W^T + 1 b^T`.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weight.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    pub(crate) fn check_input(&self, dim: usize, context: &'static str) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::shape(context, self.input_dim(), dim));
        }
        Ok(())
    }

    pub(crate) fn push_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<BlockRef<'a>>) {
        out.push(matrix_ref(format!("{prefix}.weight"), &self.weight));
        out.push(vector_ref(format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn push_blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<BlockMut<'a>>) {
        out.push(matrix_mut(format!("{prefix}.weight"), &mut self.weight));
        out.push(vector_mut(format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl EncoderParams {
    /// Layer sizes `[D, h1, ..., F]`.
    pub fn random(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs at least input and output sizes, all positive; got {sizes:?}"
            )));
        }
        let layers = sizes.windows(2).map(|w| Dense::random(w[0], w[1], 1.0, rng)).collect();
        Ok(Self { layers, activation })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: DMatrix::identity(dim, dim),
                bias: DVector::zeros(dim),
            }],
            activation: Activation::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    /// Frame-level output dimension `F`; pooled vectors have `2F` entries.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Config(format!(
                    "encoder layer {k} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Config("encoder bias length mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameterized for EncoderParams {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            l.push_blocks(&format!("encoder.{k}"), &mut out);
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.push_blocks_mut(&format!("encoder.{k}"), &mut out);
        }
        out
    }
}

/// Concatenated per-dimension means and standard deviations, length `2F`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector(pub DVector<f64>);

impl PooledVector {
    pub fn feature_dim(&self) -> usize {
        self.0.len() / 2
    }

    pub fn mean(&self) -> &[f64] {
        &self.0.as_slice()[..self.feature_dim()]
    }

    pub fn std(&self) -> &[f64] {
        &self.0.as_slice()[self.feature_dim()..]
    }
}

/// Mean and population-std pooling over the rows of `h`.
///
/// Standard deviations are `sqrt(max(var, STD_FLOOR^2))`, so a single frame
/// or a constant channel pools to exactly `STD_FLOOR`.
pub fn stats_pooling(h: &DMatrix<f64>) -> Result<PooledVector> {
    let t = h.nrows();
    if t == 0 {
        return Err(Error::Empty("statistics pooling over zero frames"));
    }
    let f = h.ncols();
    let inv_t = 1.0 / t as f64;
    let mut out = DVector::zeros(2 * f);
    for (j, col) in h.column_iter().enumerate() {
        let mean = col.iter().sum::<f64>() * inv_t;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_t;
        out[j] = mean;
        out[f + j] = var.max(STD_FLOOR * STD_FLOOR).sqrt();
    }
    Ok(PooledVector(out))
}

/// Cached activations from a forward pass, consumed by [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `outputs[0]` is the input; `outputs[k + 1]` is the output of layer `k`.
    pub outputs: Vec<DMatrix<f64>>,
    pub pooled: PooledVector,
}

pub fn encoder_forward_trace(x: &FeatureMatrix, params: &EncoderParams) -> Result<EncoderTrace> {
    params.validate()?;
    params.layers[0].check_input(x.dim(), "encoder input dimension")?;
    let mut outputs = Vec::with_capacity(params.layers.len() + 1);
    outputs.push(x.frames.clone());
    for layer in &params.layers {
        let mut a = layer.forward_rows(outputs.last().expect("non-empty"));
        params.activation.apply(&mut a);
        outputs.push(a);
    }
    let pooled = stats_pooling(outputs.last().expect("non-empty"))?;
    Ok(EncoderTrace { outputs, pooled })
}

pub fn encoder_forward(x: &FeatureMatrix, params: &EncoderParams) -> Result<PooledVector> {
    encoder_forward_trace(x, params).map(|t| t.pooled)
}

/// Gradient of a scalar with respect to encoder parameters and, optionally,
/// the input frames.
#[derive(Debug, Clone)]
pub struct EncoderGrad {
    pub params: EncoderParams,
    pub input: Option<DMatrix<f64>>,
}

/// Backpropagates `upstream` (d loss / d pooled) through pooling and the
/// frame-level layers.
pub fn encoder_backward(
    trace: &EncoderTrace,
    params: &EncoderParams,
    upstream: &DVector<f64>,
    want_input: bool,
) -> Result<EncoderGrad> {
    let h = trace.outputs.last().expect("trace has outputs");
    let (t, f) = (h.nrows(), h.ncols());
    if upstream.len() != 2 * f {
        return Err(Error::shape("pooling upstream gradient", 2 * f, upstream.len()));
    }
    let inv_t = 1.0 / t as f64;
    let mean = trace.pooled.mean();
    let std = trace.pooled.std();

    // d loss / d H for the last layer output.
    let mut grad_h = DMatrix::zeros(t, f);
    for j in 0..f {
        let g_mean = upstream[j] * inv_t;
        // Clamped channels have zero derivative through the std branch.
        let var = h.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() * inv_t;
        let g_std = if var > STD_FLOOR * STD_FLOOR {
            upstream[f + j] * inv_t / std[j]
        } else {
            0.0
        };
        for i in 0..t {
            grad_h[(i, j)] = g_mean + g_std * (h[(i, j)] - mean[j]);
        }
    }

    let mut grads = params.zeros_like();
    for k in (0..params.layers.len()).rev() {
        let out = &trace.outputs[k + 1];
        let input = &trace.outputs[k];
        let mut grad_a = grad_h;
        if params.activation != Activation::Linear {
            grad_a.zip_apply(out, |g, o| *g *= params.activation.derivative_from_output(o));
        }
        let gl = &mut grads.layers[k];
        gl.weight = grad_a.transpose() * input;
        gl.bias = grad_a.row_sum().transpose();
        if k == 0 && !want_input {
            return Ok(EncoderGrad {
                params: grads,
                input: None,
            });
        }
        grad_h = grad_a * &params.layers[k].weight;
    }
    Ok(EncoderGrad {
        params: grads,
        input: Some(grad_h),
    })
}
