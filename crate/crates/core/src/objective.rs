//! The full trainable model (encoder, stochastic head, classifier) and the
//! batch-averaged training objective with analytic gradients.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{
    deterministic_loss, vib_loss_grad, AamConfig, ClassifierHead, ExampleLoss, LossKind, RampSchedule, VibConfig,
};
use crate::model::{encoder_backward, encoder_forward_trace, Activation, EncoderParams, FeatureMatrix};
use crate::params::{BlockMut, BlockRef, Parameterized};
use crate::vib::{head_backward, head_forward, NoiseBlock, SigmaLink, VibHeadParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: VibHeadParams,
    pub classifier: ClassifierHead,
}

/// Sizes needed to build a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Frame-level layer widths; the last entry is `F`.
    pub frame_layers: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub angular: bool,
    pub scale: f64,
    pub link: SigmaLink,
}

impl ModelParams {
    pub fn init(shape: &ModelShape, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![shape.input_dim];
        sizes.extend_from_slice(&shape.frame_layers);
        let encoder = EncoderParams::random(&sizes, Activation::Tanh, rng)?;
        let mut head = VibHeadParams::random(2 * encoder.output_dim(), shape.embed_dim, rng);
        head.link = shape.link;
        let classifier = ClassifierHead::random(shape.num_classes, shape.embed_dim, shape.angular, shape.scale, rng);
        classifier.validate()?;
        Ok(Self {
            encoder,
            head,
            classifier,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }
}

impl Parameterized for ModelParams {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        let mut out = self.encoder.blocks();
        out.extend(self.head.blocks());
        out.extend(self.classifier.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = self.encoder.blocks_mut();
        out.extend(self.head.blocks_mut());
        out.extend(self.classifier.blocks_mut());
        out
    }
}

/// Deterministic embedding used at extraction time: `f_mu(x)`.
pub fn extract_embedding(x: &FeatureMatrix, params: &ModelParams) -> Result<DVector<f64>> {
    let trace = encoder_forward_trace(x, &params.encoder)?;
    Ok(head_forward(&trace.pooled, &params.head)?.embedding.mu)
}

/// Loss hyperparameters in effect at one point of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub kind: LossKind,
    pub scale: f64,
    /// AAM margin in effect; ignored by other kinds.
    pub margin: f64,
    /// VIB beta in effect; ignored by other kinds.
    pub beta: f64,
    pub num_samples: usize,
}

impl LossSettings {
    /// Settings with the scheduled margin (AAM) or beta (VIB) for `epoch`.
    pub fn scheduled(kind: LossKind, scale: f64, num_samples: usize, schedule: &RampSchedule, epoch: usize) -> Self {
        let v = schedule.value(epoch);
        Self {
            kind,
            scale,
            margin: if kind == LossKind::Aam { v } else { 0.0 },
            beta: if kind.is_vib() { v } else { 0.0 },
            num_samples,
        }
    }

    /// Noise rows needed per example.
    pub fn noise_samples(&self) -> usize {
        if self.kind.is_vib() {
            self.num_samples
        } else {
            0
        }
    }
}

/// One training example; `noise` is required for VIB kinds.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub features: &'a FeatureMatrix,
    pub target: usize,
    pub noise: Option<NoiseBlock>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub grads: ModelParams,
}

fn check_classifier(params: &ModelParams, kind: LossKind) -> Result<()> {
    if params.classifier.length_normalize != kind.is_angular() {
        return Err(Error::Config(format!(
            "classifier normalization does not match loss kind `{kind}`"
        )));
    }
    Ok(())
}

/// Loss and full-model gradient for a single example.
pub fn example_objective(ex: &Example<'_>, params: &ModelParams, settings: &LossSettings) -> Result<ObjectiveValue> {
    check_classifier(params, settings.kind)?;
    let trace = encoder_forward_trace(ex.features, &params.encoder)?;
    let head_out = head_forward(&trace.pooled, &params.head)?;
    let emb = &head_out.embedding;
    let loss: ExampleLoss = match settings.kind {
        LossKind::Ce => deterministic_loss(&emb.mu, &params.classifier, ex.target, None)?,
        LossKind::Aam => {
            let cfg = AamConfig::new(settings.margin, settings.scale)?;
            deterministic_loss(&emb.mu, &params.classifier, ex.target, Some(&cfg))?
        }
        LossKind::Vib | LossKind::VibLn => {
            let cfg = VibConfig::new(settings.beta, settings.num_samples, settings.kind == LossKind::VibLn)?;
            let noise = ex
                .noise
                .as_ref()
                .ok_or_else(|| Error::Config("VIB example without a noise block".into()))?;
            vib_loss_grad(emb, &params.classifier, ex.target, &cfg, noise)?
        }
    };
    if !loss.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss of utterance `{}`",
            ex.features.utterance_id
        )));
    }
    let (head_grad, pooled_grad) = head_backward(
        &trace.pooled,
        &params.head,
        &head_out,
        &loss.grad_mu,
        loss.grad_sigma.as_ref(),
    );
    let enc = encoder_backward(&trace, &params.encoder, &pooled_grad, false)?;
    Ok(ObjectiveValue {
        loss: loss.loss,
        ce: loss.ce,
        kl: loss.kl,
        grads: ModelParams {
            encoder: enc.params,
            head: head_grad,
            classifier: loss.grad_head,
        },
    })
}

/// Mean loss over the batch and its gradient.
///
/// Per-example results are reduced in batch order, so the value does not
/// depend on how examples might be distributed over workers.
pub fn batch_objective(batch: &[Example<'_>], params: &ModelParams, settings: &LossSettings) -> Result<ObjectiveValue> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = ObjectiveValue {
        loss: 0.0,
        ce: 0.0,
        kl: 0.0,
        grads: params.zeros_like(),
    };
    for ex in batch {
        let v = example_objective(ex, params, settings)?;
        total.loss += w * v.loss;
        total.ce += w * v.ce;
        total.kl += w * v.kl;
        total.grads.axpy(w, &v.grads);
    }
    Ok(total)
}
