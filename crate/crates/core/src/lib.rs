//! Variational information bottleneck training for speaker embeddings,
//! with softmax and additive-angular-margin baselines, scoring backends
//! (LDA, two-covariance PLDA, cosine, adaptive s-norm), detection metrics,
//! and a synthetic speaker population for desk-scale experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod vib;

pub use error::{Error, Result};
