//! Seeded synthetic speaker population.
//!
//! Each speaker owns a latent identity vector drawn in a low-dimensional
//! speaker space and mapped into feature space by a fixed random
//! orthonormal map. Every utterance adds a session offset, and every frame
//! adds i.i.d. Gaussian noise. All draws come from keyed streams, so the
//! corpus depends only on the configuration and seed.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::FeatureMatrix;
use crate::rng::{normal_vec, permutation, stream, SeedTree};

/// Decimal places kept in generated features; matches the text format.
pub const FEATURE_DECIMALS: i32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub num_speakers: usize,
    pub heldout_speakers: usize,
    pub cohort_speakers: usize,
    pub feature_dim: usize,
    pub speaker_space_dim: usize,
    pub between_scale: f64,
    pub within_scale: f64,
    pub frame_noise_scale: f64,
    /// Frames per held-out and cohort utterance; also the training crop length.
    pub frames: usize,
    /// Frames stored per training utterance (at least `frames`).
    pub train_frames: usize,
    pub utts_per_speaker: usize,
    pub heldout_utts_per_speaker: usize,
    /// Leading held-out utterances of each speaker pooled into its enrollment model.
    pub enroll_utts: usize,
    /// Per-speaker random rotation of anisotropic frame noise.
    pub hard_mode: bool,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            num_speakers: 200,
            heldout_speakers: 50,
            cohort_speakers: 50,
            feature_dim: 12,
            speaker_space_dim: 8,
            between_scale: 1.0,
            within_scale: 0.3,
            frame_noise_scale: 1.0,
            frames: 300,
            train_frames: 300,
            utts_per_speaker: 8,
            heldout_utts_per_speaker: 10,
            enroll_utts: 1,
            hard_mode: false,
            seed: 1,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 || self.speaker_space_dim == 0 {
            return bad("feature_dim and speaker_space_dim must be >= 1");
        }
        if self.speaker_space_dim > self.feature_dim {
            return bad("speaker_space_dim cannot exceed feature_dim");
        }
        if !(self.between_scale > 0.0 && self.within_scale > 0.0 && self.frame_noise_scale > 0.0) {
            return bad("between, within, and frame noise scales must be > 0");
        }
        if self.frames == 0 || self.train_frames < self.frames {
            return bad("frames must be >= 1 and train_frames >= frames");
        }
        if self.num_speakers < 2 || self.utts_per_speaker == 0 {
            return bad("need at least 2 training speakers with >= 1 utterance");
        }
        if self.heldout_speakers > 0 && self.heldout_utts_per_speaker <= self.enroll_utts {
            return bad("held-out speakers need more utterances than enroll_utts");
        }
        if self.heldout_speakers > 0 && self.enroll_utts == 0 {
            return bad("enroll_utts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Enroll,
    Test,
    Cohort,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Enroll, Split::Test, Split::Cohort];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Enroll => "heldout-enroll",
            Split::Test => "heldout-test",
            Split::Cohort => "cohort",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// An enrollment model: id plus the utterances averaged into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollModel {
    pub id: String,
    pub speaker: String,
    pub utterances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<FeatureMatrix>,
    pub splits: Vec<Split>,
    pub enroll_models: Vec<EnrollModel>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &FeatureMatrix> {
        self.utterances
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(u, _)| u)
    }

    /// Sorted distinct speaker ids of a split.
    pub fn speakers(&self, split: Split) -> Vec<String> {
        let mut s: Vec<String> = self.split(split).filter_map(|u| u.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn speaker_id(global: usize) -> String {
    format!("spk{global:04}")
}

fn round_feature(v: f64) -> f64 {
    let scale = 10f64.powi(FEATURE_DECIMALS);
    (v * scale).round() / scale
}

/// Random orthonormal `rows x cols` matrix (`cols <= rows`).
fn orthonormal(tree: SeedTree, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(rows, cols, &normal_vec(&mut tree.rng(), rows * cols));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix column signs so the factorization is unique.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn generate(cfg: &PopulationConfig) -> Result<Corpus> {
    cfg.validate()?;
    let root = SeedTree::new(cfg.seed);
    let d = cfg.feature_dim;
    let map = orthonormal(root.child(stream::PROJECTION), d, cfg.speaker_space_dim);
    // Hard-mode noise spreads, geometric from 2 down to 0.25.
    let spreads: Vec<f64> = (0..d)
        .map(|i| {
            let p = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
            2.0 * (0.125f64).powf(p)
        })
        .collect();

    let mut utterances = Vec::new();
    let mut splits = Vec::new();
    let mut enroll_models = Vec::new();

    let blocks = [
        (cfg.num_speakers, cfg.utts_per_speaker, cfg.train_frames),
        (cfg.heldout_speakers, cfg.heldout_utts_per_speaker, cfg.frames),
        (cfg.cohort_speakers, cfg.utts_per_speaker, cfg.frames),
    ];
    let mut global = 0usize;
    for (block, &(count, utts, frames)) in blocks.iter().enumerate() {
        for _ in 0..count {
            let spk = speaker_id(global);
            let identity = DVector::from_vec(normal_vec(
                &mut root.path(&[stream::SPEAKERS, global as u64]).rng(),
                cfg.speaker_space_dim,
            )) * cfg.between_scale;
            let speaker_mean = &map * identity;
            let rotation = cfg
                .hard_mode
                .then(|| orthonormal(root.path(&[stream::ROTATION, global as u64]), d, d));
            let mut model_utts = Vec::new();
            for u in 0..utts {
                let key = [global as u64, u as u64];
                let session = DVector::from_vec(normal_vec(&mut root.child(stream::SESSIONS).path(&key).rng(), d))
                    * cfg.within_scale;
                let mean = &speaker_mean + session;
                let noise = normal_vec(&mut root.child(stream::FRAMES).path(&key).rng(), frames * d);
                let mut frames_m = DMatrix::from_row_slice(frames, d, &noise) * cfg.frame_noise_scale;
                if let Some(rot) = &rotation {
                    for mut row in frames_m.row_iter_mut() {
                        let scaled = DVector::from_iterator(d, row.iter().zip(&spreads).map(|(v, s)| v * s));
                        row.copy_from(&(rot * scaled).transpose());
                    }
                }
                for mut row in frames_m.row_iter_mut() {
                    row += mean.transpose();
                }
                frames_m.apply(|v| *v = round_feature(*v));
                let utt_id = format!("{spk}-u{u:03}");
                let split = match block {
                    0 => Split::Train,
                    1 if u < cfg.enroll_utts => Split::Enroll,
                    1 => Split::Test,
                    _ => Split::Cohort,
                };
                if split == Split::Enroll {
                    model_utts.push(utt_id.clone());
                }
                utterances.push(FeatureMatrix::new(utt_id, Some(spk.clone()), frames_m)?);
                splits.push(split);
            }
            if block == 1 {
                enroll_models.push(EnrollModel {
                    id: format!("{spk}-enroll"),
                    speaker: spk.clone(),
                    utterances: model_utts,
                });
            }
            global += 1;
        }
    }
    Ok(Corpus {
        utterances,
        splits,
        enroll_models,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

pub type TrialList = Vec<Trial>;

/// Samples target and nontarget (enrollment model, test utterance) pairs
/// without replacement.
pub fn make_trials(corpus: &Corpus, num_target: usize, num_nontarget: usize, seed: u64) -> Result<TrialList> {
    let tests: Vec<&FeatureMatrix> = corpus.split(Split::Test).collect();
    let eligible = corpus
        .enroll_models
        .iter()
        .filter(|m| {
            tests
                .iter()
                .any(|t| t.speaker_id.as_deref() == Some(m.speaker.as_str()))
        })
        .count();
    if eligible < 2 {
        return Err(Error::Insufficient(
            "need at least 2 held-out speakers with enrollment and test utterances".into(),
        ));
    }
    let mut target_pool = Vec::new();
    let mut nontarget_pool = Vec::new();
    for (mi, m) in corpus.enroll_models.iter().enumerate() {
        for (ti, t) in tests.iter().enumerate() {
            if m.utterances.contains(&t.utterance_id) {
                continue;
            }
            if t.speaker_id.as_deref() == Some(m.speaker.as_str()) {
                target_pool.push((mi, ti));
            } else {
                nontarget_pool.push((mi, ti));
            }
        }
    }
    if num_target > target_pool.len() {
        return Err(Error::Insufficient(format!(
            "requested {num_target} target trials but at most {} exist",
            target_pool.len()
        )));
    }
    if num_nontarget > nontarget_pool.len() {
        return Err(Error::Insufficient(format!(
            "requested {num_nontarget} nontarget trials but at most {} exist",
            nontarget_pool.len()
        )));
    }
    let root = SeedTree::new(seed).child(stream::TRIALS);
    let pick = |pool: &[(usize, usize)], n: usize, key: u64| -> Vec<(usize, usize)> {
        let mut chosen: Vec<(usize, usize)> = permutation(&mut root.child(key).rng(), pool.len())
            .into_iter()
            .take(n)
            .map(|i| pool[i])
            .collect();
        chosen.sort_unstable();
        chosen
    };
    let mut trials: Vec<Trial> = pick(&target_pool, num_target, 0)
        .into_iter()
        .map(|p| (p, true))
        .chain(pick(&nontarget_pool, num_nontarget, 1).into_iter().map(|p| (p, false)))
        .map(|((mi, ti), target)| Trial {
            enroll: corpus.enroll_models[mi].id.clone(),
            test: tests[ti].utterance_id.clone(),
            target,
        })
        .collect();
    trials.sort_by(|a, b| (&a.enroll, &a.test).cmp(&(&b.enroll, &b.test)));
    Ok(trials)
}
