//! End-to-end commands: corpus generation, training, extraction, scoring,
//! and evaluation, plus the on-disk layout they share.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DVector;
use rand::Rng;

use crate::backend::{adaptive_snorm, average_enrollment, BackendChain, CohortScores, EmbeddingSet};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
use crate::io::{self, ScoreRecord};
use crate::losses::LossKind;
use crate::metrics::{det_points, eer_from_points, MetricPreset, OperatingPoint, ScoreSet};
use crate::model::FeatureMatrix;
use crate::objective::{batch_objective, extract_embedding, Example, LossSettings, ModelParams, ModelShape};
use crate::optim::{LinearDecay, Sgd};
use crate::params::Parameterized;
use crate::rng::{permutation, stream, SeedTree};
use crate::synth::{generate, make_trials, Corpus, Split, Trial};
use crate::vib::NoiseBlock;

/// File locations under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn features(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.feats"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus/manifest.txt")
    }

    pub fn trials(&self) -> PathBuf {
        self.root.join("corpus/trials.txt")
    }

    pub fn enroll_map(&self) -> PathBuf {
        self.root.join("corpus/enroll_map.txt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train/log.tsv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("train/epoch_{epoch:03}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("train/final.ckpt")
    }

    pub fn embeddings(&self, split: Split) -> PathBuf {
        self.root.join("embeddings").join(format!("{split}.txt"))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn det(&self) -> PathBuf {
        self.root.join("det.txt")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub counts: BTreeMap<Split, (usize, usize)>,
    pub target_trials: usize,
    pub nontarget_trials: usize,
}

impl fmt::Display for GenSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (split, (spk, utt)) in &self.counts {
            writeln!(f, "{split}: {spk} speakers, {utt} utterances")?;
        }
        write!(
            f,
            "trials: {} target, {} nontarget",
            self.target_trials, self.nontarget_trials
        )
    }
}

/// Corpus plus trial list, entirely in memory.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<Trial>)> {
    let corpus = generate(&cfg.corpus)?;
    let trials = make_trials(&corpus, cfg.num_target_trials, cfg.num_nontarget_trials, cfg.seed)?;
    Ok((corpus, trials))
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<GenSummary> {
    let (corpus, trials) = build_corpus(cfg)?;
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let utts: Vec<&FeatureMatrix> = corpus.split(split).collect();
        counts.insert(split, (corpus.speakers(split).len(), utts.len()));
        io::write_text(&layout.features(split), &io::format_features(&utts))?;
    }
    io::write_text(&layout.manifest(), &io::format_manifest(&corpus))?;
    io::write_text(&layout.trials(), &io::format_trials(&trials))?;
    io::write_text(&layout.enroll_map(), &io::format_enroll_map(&corpus.enroll_models))?;
    Ok(GenSummary {
        counts,
        target_trials: trials.iter().filter(|t| t.target).count(),
        nontarget_trials: trials.iter().filter(|t| !t.target).count(),
    })
}

pub fn load_split(layout: &Layout, split: Split) -> Result<Vec<FeatureMatrix>> {
    let path = layout.features(split);
    io::parse_features(&path.display().to_string(), &io::read_text(&path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub frames: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub beta: f64,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
}

pub const LOG_HEADER: &str = "epoch\tphase\tframes\tlr\tmargin\tbeta\tloss\tce\tkl";

impl EpochRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.phase,
            self.frames,
            self.learning_rate,
            self.margin,
            self.beta,
            self.loss,
            self.ce,
            self.kl
        )
    }
}

pub fn model_shape(cfg: &ExperimentConfig, num_classes: usize) -> ModelShape {
    ModelShape {
        input_dim: cfg.corpus.feature_dim,
        frame_layers: cfg.frame_layers.clone(),
        embed_dim: cfg.embed_dim,
        num_classes,
        angular: cfg.loss.kind().is_angular(),
        scale: cfg.loss.scale(),
        link: cfg.loss.link(),
    }
}

/// Loss settings, crop length, and phase in effect for `epoch`.
pub fn epoch_settings(cfg: &ExperimentConfig, epoch: usize) -> (LossSettings, usize, Phase) {
    let kind = cfg.loss.kind();
    let mut settings = LossSettings::scheduled(kind, cfg.loss.scale(), cfg.loss.num_samples(), &cfg.schedule, epoch);
    match &cfg.finetune {
        Some(ft) if epoch >= ft.start_epoch => {
            if let Some(m) = ft.margin {
                settings.margin = m;
            }
            (settings, ft.frames, Phase::Finetune)
        }
        _ => (settings, cfg.corpus.frames, Phase::Train),
    }
}

fn class_labels(utts: &[FeatureMatrix]) -> Result<Vec<usize>> {
    let mut speakers: Vec<&str> = Vec::with_capacity(utts.len());
    for u in utts {
        let s = u
            .speaker_id
            .as_deref()
            .ok_or_else(|| Error::Config(format!("training utterance `{}` has no speaker", u.utterance_id)))?;
        speakers.push(s);
    }
    let mut sorted = speakers.clone();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(speakers.iter().map(|s| sorted.binary_search(s).unwrap_or(0)).collect())
}

/// Trains a model from scratch; `on_epoch` sees every completed epoch.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &[FeatureMatrix],
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<()>,
) -> Result<ModelParams> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let labels = class_labels(train)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::Insufficient("training needs at least 2 speakers".into()));
    }
    let root = SeedTree::new(cfg.seed);
    let mut params = ModelParams::init(&model_shape(cfg, num_classes), &mut root.child(stream::INIT).rng())?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let decay = LinearDecay {
        initial: cfg.learning_rate,
        final_lr: cfg.final_learning_rate,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut sgd = Sgd::new(cfg.momentum);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (settings, frames, phase) = epoch_settings(cfg, epoch);
        let order = permutation(&mut root.path(&[stream::SHUFFLE, epoch as u64]).rng(), train.len());
        let (mut loss, mut ce, mut kl) = (0.0, 0.0, 0.0);
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut crops = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                let utt = &train[i];
                if utt.num_frames() < frames {
                    return Err(Error::shape(
                        "training utterance frames",
                        format!(">= {frames}"),
                        utt.num_frames(),
                    ));
                }
                let key = [epoch as u64, i as u64];
                let start = root
                    .child(stream::CROP)
                    .path(&key)
                    .rng()
                    .random_range(0..=utt.num_frames() - frames);
                crops.push(utt.crop(start, frames)?);
            }
            let batch: Vec<Example<'_>> = crops
                .iter()
                .zip(batch_idx)
                .map(|(x, &i)| Example {
                    features: x,
                    target: labels[i],
                    noise: (settings.noise_samples() > 0).then(|| {
                        NoiseBlock::generate(
                            root.child(stream::NOISE).path(&[epoch as u64, i as u64]),
                            settings.noise_samples(),
                            cfg.embed_dim,
                        )
                    }),
                })
                .collect();
            let value = batch_objective(&batch, &params, &settings)?;
            if !value.loss.is_finite() || !value.grads.all_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let w = batch.len() as f64 / train.len() as f64;
            loss += w * value.loss;
            ce += w * value.ce;
            kl += w * value.kl;
            sgd.step(&mut params, &value.grads, decay.at(step));
            step += 1;
            if !params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch} step")));
            }
        }
        let record = EpochRecord {
            epoch,
            phase,
            frames,
            learning_rate: decay.at(step.saturating_sub(1)),
            margin: settings.margin,
            beta: settings.beta,
            loss,
            ce,
            kl,
        };
        info!("{}", record.tsv());
        on_epoch(&record, &params)?;
    }
    Ok(params)
}

pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<ModelParams> {
    let train = load_split(layout, Split::Train)?;
    let log_path = layout.train_log();
    io::write_text(&log_path, &format!("{LOG_HEADER}\n"))?;
    let mut log: File = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let hash = cfg.hash();
    let params = train_model(cfg, &train, |record, params| {
        writeln!(log, "{}", record.tsv())
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        let ck = Checkpoint {
            epoch: record.epoch,
            config_hash: hash,
            params: params.clone(),
        };
        ck.save(&layout.epoch_checkpoint(record.epoch))
    })?;
    Checkpoint {
        epoch: cfg.epochs,
        config_hash: hash,
        params: params.clone(),
    }
    .save(&layout.final_checkpoint())?;
    Ok(params)
}

pub fn check_model_dims(cfg: &ExperimentConfig, params: &ModelParams) -> Result<()> {
    if params.encoder.input_dim() != cfg.corpus.feature_dim {
        return Err(Error::shape(
            "checkpoint input dim",
            cfg.corpus.feature_dim,
            params.encoder.input_dim(),
        ));
    }
    if params.embed_dim() != cfg.embed_dim {
        return Err(Error::shape(
            "checkpoint embedding dim",
            cfg.embed_dim,
            params.embed_dim(),
        ));
    }
    Ok(())
}

pub fn extract_set(params: &ModelParams, utts: &[&FeatureMatrix]) -> Result<EmbeddingSet> {
    let rows: Vec<DVector<f64>> = utts
        .iter()
        .map(|u| extract_embedding(u, params))
        .collect::<Result<_>>()?;
    let matrix = nalgebra::DMatrix::from_fn(rows.len(), params.embed_dim(), |i, j| rows[i][j]);
    EmbeddingSet::new(
        utts.iter().map(|u| u.utterance_id.clone()).collect(),
        utts.iter().map(|u| u.speaker_id.clone()).collect(),
        matrix,
    )
}

pub fn cmd_extract(cfg: &ExperimentConfig, layout: &Layout, checkpoint: &Path) -> Result<Vec<(Split, usize)>> {
    let ck = Checkpoint::load(checkpoint)?;
    check_model_dims(cfg, &ck.params)?;
    if ck.config_hash != cfg.hash() {
        warn!("checkpoint was trained with a different configuration");
    }
    let mut written = Vec::new();
    for split in Split::ALL {
        let utts = load_split(layout, split)?;
        if utts.is_empty() {
            continue;
        }
        let refs: Vec<&FeatureMatrix> = utts.iter().collect();
        let set = extract_set(&ck.params, &refs)?;
        io::write_text(&layout.embeddings(split), &io::format_embeddings(&set))?;
        written.push((split, set.len()));
    }
    Ok(written)
}

/// Embeddings available for scoring.
pub struct ScoringInputs<'a> {
    pub train: &'a EmbeddingSet,
    pub evaluation: Vec<&'a EmbeddingSet>,
    pub cohort: Option<&'a EmbeddingSet>,
    pub enroll_map: &'a [(String, Vec<String>)],
}

/// Scores every trial in order. Enrollment ids found in the map are
/// averaged over their utterances before preprocessing; other ids are
/// looked up directly as utterances.
pub fn score_trials(cfg: &ExperimentConfig, inputs: &ScoringInputs<'_>, trials: &[Trial]) -> Result<Vec<ScoreRecord>> {
    let chain = BackendChain::fit(inputs.train, cfg.backend, &cfg.preprocess, cfg.plda_iterations)?;
    for w in &chain.warnings {
        warn!("{w}");
    }
    let mut index: HashMap<&str, (&EmbeddingSet, usize)> = HashMap::new();
    for set in inputs
        .evaluation
        .iter()
        .copied()
        .chain([inputs.train])
        .chain(inputs.cohort)
    {
        for (i, id) in set.ids.iter().enumerate() {
            index.entry(id.as_str()).or_insert((set, i));
        }
    }
    let lookup = |id: &str| -> Result<DVector<f64>> {
        index
            .get(id)
            .map(|(set, i)| set.row(*i))
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    };
    let map: HashMap<&str, &Vec<String>> = inputs.enroll_map.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let mut enroll_cache: HashMap<&str, DVector<f64>> = HashMap::new();
    let mut test_cache: HashMap<&str, DVector<f64>> = HashMap::new();
    let cohort = match (cfg.snorm_k, inputs.cohort) {
        (Some(_), Some(c)) => Some(chain.preprocess.apply_set(c)?),
        (Some(_), None) => return Err(Error::Config("s-norm enabled but no cohort embeddings".into())),
        _ => None,
    };
    let cohort_scores = |v: &DVector<f64>| -> Result<CohortScores> {
        let c = cohort.as_ref().expect("cohort present when s-norm is enabled");
        let scores = (0..c.len())
            .map(|i| chain.scorer.score(v, &c.row(i)))
            .collect::<Result<_>>()?;
        Ok(CohortScores::new(scores))
    };
    let mut enroll_cohort: HashMap<&str, CohortScores> = HashMap::new();
    let mut test_cohort: HashMap<&str, CohortScores> = HashMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        if !enroll_cache.contains_key(t.enroll.as_str()) {
            let raw = match map.get(t.enroll.as_str()) {
                Some(utts) => average_enrollment(&utts.iter().map(|u| lookup(u)).collect::<Result<Vec<_>>>()?)?,
                None => lookup(&t.enroll)?,
            };
            enroll_cache.insert(&t.enroll, chain.preprocess.apply(&raw)?);
        }
        if !test_cache.contains_key(t.test.as_str()) {
            test_cache.insert(&t.test, chain.preprocess.apply(&lookup(&t.test)?)?);
        }
        let e = &enroll_cache[t.enroll.as_str()];
        let x = &test_cache[t.test.as_str()];
        let mut score = chain.scorer.score(e, x)?;
        if let Some(k) = cfg.snorm_k {
            if !enroll_cohort.contains_key(t.enroll.as_str()) {
                enroll_cohort.insert(&t.enroll, cohort_scores(e)?);
            }
            if !test_cohort.contains_key(t.test.as_str()) {
                test_cohort.insert(&t.test, cohort_scores(x)?);
            }
            score = adaptive_snorm(
                score,
                &enroll_cohort[t.enroll.as_str()],
                &test_cohort[t.test.as_str()],
                k,
            )?;
        }
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score of trial {} {}", t.enroll, t.test)));
        }
        out.push(ScoreRecord {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score,
            target: Some(t.target),
        });
    }
    Ok(out)
}

fn load_embeddings(layout: &Layout, split: Split) -> Result<Option<EmbeddingSet>> {
    let path = layout.embeddings(split);
    if !path.exists() {
        return Ok(None);
    }
    io::parse_embeddings(&path.display().to_string(), &io::read_text(&path)?).map(Some)
}

pub fn cmd_score(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    let train = load_embeddings(layout, Split::Train)?
        .ok_or_else(|| Error::Config("training embeddings are missing; run extract first".into()))?;
    let enroll = load_embeddings(layout, Split::Enroll)?;
    let test = load_embeddings(layout, Split::Test)?;
    let cohort = load_embeddings(layout, Split::Cohort)?;
    let trials_path = layout.trials();
    let trials = io::parse_trials(&trials_path.display().to_string(), &io::read_text(&trials_path)?)?;
    let map_path = layout.enroll_map();
    let enroll_map = if map_path.exists() {
        io::parse_enroll_map(&map_path.display().to_string(), &io::read_text(&map_path)?)?
    } else {
        Vec::new()
    };
    let inputs = ScoringInputs {
        train: &train,
        evaluation: enroll.iter().chain(test.iter()).collect(),
        cohort: cohort.as_ref(),
        enroll_map: &enroll_map,
    };
    let records = score_trials(cfg, &inputs, &trials)?;
    io::write_text(&layout.scores(), &io::format_scores(&records))?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub preset: MetricPreset,
    pub eer: f64,
    pub min_dcf: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub det: Vec<OperatingPoint>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trials: {} target, {} nontarget",
            self.num_target, self.num_nontarget
        )?;
        writeln!(f, "EER: {:.2}%", 100.0 * self.eer)?;
        write!(f, "min_dcf ({}): {:.3}", self.preset, self.min_dcf)
    }
}

pub fn evaluate(records: &[ScoreRecord], preset: MetricPreset) -> Result<EvalReport> {
    let (mut tar, mut non) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        match r.target {
            Some(true) => tar.push(r.score),
            Some(false) => non.push(r.score),
            None => {
                return Err(Error::Config(format!(
                    "score record {} ({} {}) has no label",
                    i + 1,
                    r.enroll,
                    r.test
                )))
            }
        }
    }
    let set = ScoreSet::new(tar, non);
    let det = det_points(&set)?;
    Ok(EvalReport {
        preset,
        eer: eer_from_points(&det),
        min_dcf: preset.min_cost(&set)?,
        num_target: set.target_scores.len(),
        num_nontarget: set.nontarget_scores.len(),
        det,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, layout: &Layout) -> Result<EvalReport> {
    let path = layout.scores();
    let records = io::parse_scores(&path.display().to_string(), &io::read_text(&path)?)?;
    let report = evaluate(&records, cfg.metric)?;
    let summary = format!("{report}\neer {}\nmin_dcf {}\n", report.eer, report.min_dcf);
    io::write_text(&layout.report(), &summary)?;
    let det: String = std::iter::once("threshold\tp_miss\tp_fa\n".to_string())
        .chain(
            report
                .det
                .iter()
                .map(|p| format!("{}\t{}\t{}\n", p.threshold, p.p_miss, p.p_fa)),
        )
        .collect();
    io::write_text(&layout.det(), &det)?;
    Ok(report)
}

/// Gradient check of the configured model and loss on a few short crops.
pub fn cmd_grad_check(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    const CROP: usize = 12;
    const UTTS: usize = 3;
    const PER_BLOCK: usize = 24;
    let mut small = cfg.corpus.clone();
    small.num_speakers = 3;
    small.heldout_speakers = 0;
    small.cohort_speakers = 0;
    small.utts_per_speaker = 1;
    small.frames = CROP;
    small.train_frames = CROP;
    let corpus = generate(&small)?;
    let utts: Vec<&FeatureMatrix> = corpus.split(Split::Train).take(UTTS).collect();
    let root = SeedTree::new(cfg.seed);
    let params = ModelParams::init(&model_shape(cfg, UTTS), &mut root.child(stream::INIT).rng())?;
    let final_epoch = cfg.epochs - 1;
    let (mut settings, _, _) = epoch_settings(cfg, final_epoch);
    if settings.kind == LossKind::Aam && settings.margin == 0.0 {
        settings.margin = cfg.loss.final_value();
    }
    let batch: Vec<Example<'_>> = utts
        .iter()
        .enumerate()
        .map(|(i, x)| Example {
            features: x,
            target: i,
            noise: (settings.noise_samples() > 0).then(|| {
                NoiseBlock::generate(
                    root.path(&[stream::NOISE, i as u64]),
                    settings.noise_samples(),
                    cfg.embed_dim,
                )
            }),
        })
        .collect();
    let analytic = batch_objective(&batch, &params, &settings)?.grads;
    let report = grad_check(&params, &analytic, DEFAULT_STEP, Some(PER_BLOCK), |p| {
        batch_objective(&batch, p, &settings).map(|v| v.loss)
    })?;
    Ok(report)
}

/// Outcome of an in-memory train/extract/score/eval run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: EvalReport,
    pub scores: Vec<ScoreRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Runs the whole pipeline in memory, without touching the file system.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (corpus, trials) = build_corpus(cfg)?;
    let train: Vec<FeatureMatrix> = corpus.split(Split::Train).cloned().collect();
    let mut epochs = Vec::new();
    let params = train_model(cfg, &train, |r, _| {
        epochs.push(r.clone());
        Ok(())
    })?;
    let sets: Vec<EmbeddingSet> = Split::ALL
        .iter()
        .map(|&s| extract_set(&params, &corpus.split(s).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let enroll_map: Vec<(String, Vec<String>)> = corpus
        .enroll_models
        .iter()
        .map(|m| (m.id.clone(), m.utterances.clone()))
        .collect();
    let inputs = ScoringInputs {
        train: &sets[0],
        evaluation: vec![&sets[1], &sets[2]],
        cohort: (!sets[3].is_empty()).then_some(&sets[3]),
        enroll_map: &enroll_map,
    };
    let scores = score_trials(cfg, &inputs, &trials)?;
    let report = evaluate(&scores, cfg.metric)?;
    Ok(ExperimentResult { report, scores, epochs })
}
