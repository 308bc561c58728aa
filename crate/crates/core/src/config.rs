//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments, as is anything after a `#` on a
//! line. Unknown keys, duplicate keys, and keys that do not apply to the
//! selected loss are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backend::{BackendKind, PreprocessConfig};
use crate::error::{Error, Result};
use crate::losses::{LossKind, RampSchedule, DEFAULT_SCALE};
use crate::metrics::MetricPreset;
use crate::synth::PopulationConfig;
use crate::vib::SigmaLink;

#[derive(Debug, Clone, PartialEq)]
pub enum LossParams {
    Ce,
    Aam {
        margin: f64,
        scale: f64,
    },
    Vib {
        beta: f64,
        num_samples: usize,
        link: SigmaLink,
    },
    VibLn {
        beta: f64,
        num_samples: usize,
        scale: f64,
        link: SigmaLink,
    },
}

impl LossParams {
    pub fn kind(&self) -> LossKind {
        match self {
            LossParams::Ce => LossKind::Ce,
            LossParams::Aam { .. } => LossKind::Aam,
            LossParams::Vib { .. } => LossKind::Vib,
            LossParams::VibLn { .. } => LossKind::VibLn,
        }
    }

    /// The margin (AAM) or beta (VIB) reached after the ramp; 0 for CE.
    pub fn final_value(&self) -> f64 {
        match *self {
            LossParams::Ce => 0.0,
            LossParams::Aam { margin, .. } => margin,
            LossParams::Vib { beta, .. } | LossParams::VibLn { beta, .. } => beta,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            LossParams::Aam { scale, .. } | LossParams::VibLn { scale, .. } => scale,
            _ => DEFAULT_SCALE,
        }
    }

    pub fn num_samples(&self) -> usize {
        match *self {
            LossParams::Vib { num_samples, .. } | LossParams::VibLn { num_samples, .. } => num_samples,
            _ => 0,
        }
    }

    pub fn link(&self) -> SigmaLink {
        match *self {
            LossParams::Vib { link, .. } | LossParams::VibLn { link, .. } => link,
            _ => SigmaLink::Softplus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub start_epoch: usize,
    pub frames: usize,
    /// AAM only; VIB keeps its beta.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: PopulationConfig,
    pub num_target_trials: usize,
    pub num_nontarget_trials: usize,
    pub frame_layers: Vec<usize>,
    pub embed_dim: usize,
    pub loss: LossParams,
    pub schedule: RampSchedule,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune: Option<FinetuneConfig>,
    pub backend: BackendKind,
    pub preprocess: PreprocessConfig,
    pub plda_iterations: usize,
    pub snorm_k: Option<usize>,
    pub metric: MetricPreset,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::parse("", "<default>").expect("empty config is valid")
    }
}

fn link_token(link: SigmaLink) -> &'static str {
    match link {
        SigmaLink::Softplus => "softplus",
        SigmaLink::Exp => "exp",
    }
}

fn parse_link(s: &str) -> std::result::Result<SigmaLink, String> {
    match s {
        "softplus" => Ok(SigmaLink::Softplus),
        "exp" => Ok(SigmaLink::Exp),
        _ => Err(format!("expected softplus or exp, got `{s}`")),
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid layer width `{}`", t.trim()))
        })
        .collect()
}

struct Entries<'a> {
    file: &'a str,
    map: BTreeMap<String, (usize, String)>,
}

impl<'a> Entries<'a> {
    fn parse(text: &str, file: &'a str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(parse_err("missing key".into()));
            }
            if let Some((prev, _)) = map.insert(k.to_string(), (i + 1, v.to_string())) {
                return Err(parse_err(format!("duplicate key `{k}` (first set on line {prev})")));
            }
        }
        Ok(Self { file, map })
    }

    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line,
            msg,
        }
    }

    fn take_with<T>(&mut self, key: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => f(&v)
                .map(Some)
                .map_err(|m| self.err(line, format!("invalid value `{v}` for key `{key}`: {m}"))),
        }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.take_with(key, |v| v.parse::<T>().map_err(|_| "cannot parse".to_string()))
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Rejects `keys` that are set although they do not apply.
    fn forbid(&self, keys: &[&str], reason: &str) -> Result<()> {
        for k in keys {
            if let Some((line, _)) = self.map.get(*k) {
                return Err(self.err(*line, format!("key `{k}` does not apply: {reason}")));
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().min_by_key(|(_, (line, _))| *line) {
            Some((k, (line, _))) => Err(self.err(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut e = Entries::parse(text, file)?;
        let d = PopulationConfig::default();
        let frames = e.get("frames", d.frames)?;
        let finetune_enabled = e.take_with("finetune", parse_bool)?.unwrap_or(false);
        let epochs = e.get("epochs", 24usize)?;
        let kind: LossKind = e.get("loss", LossKind::Ce)?;

        match kind {
            LossKind::Ce => e.forbid(
                &[
                    "margin",
                    "scale",
                    "beta",
                    "num_samples",
                    "sigma_link",
                    "warmup_epochs",
                    "ramp_epochs",
                    "ramp_floor_ratio",
                    "finetune_margin",
                ],
                "loss = ce",
            )?,
            LossKind::Aam => e.forbid(&["beta", "num_samples", "sigma_link"], "loss = aam")?,
            LossKind::Vib => e.forbid(&["margin", "scale", "finetune_margin"], "loss = vib")?,
            LossKind::VibLn => e.forbid(&["margin", "finetune_margin"], "loss = vib_ln")?,
        }
        if !finetune_enabled {
            e.forbid(
                &["finetune_start", "finetune_frames", "finetune_margin"],
                "finetune is disabled",
            )?;
        }
        let loss = match kind {
            LossKind::Ce => LossParams::Ce,
            LossKind::Aam => LossParams::Aam {
                margin: e.get("margin", 0.2)?,
                scale: e.get("scale", DEFAULT_SCALE)?,
            },
            LossKind::Vib => LossParams::Vib {
                beta: e.get("beta", 0.004)?,
                num_samples: e.get("num_samples", 10)?,
                link: e.take_with("sigma_link", parse_link)?.unwrap_or_default(),
            },
            LossKind::VibLn => LossParams::VibLn {
                beta: e.get("beta", 0.004)?,
                num_samples: e.get("num_samples", 10)?,
                scale: e.get("scale", DEFAULT_SCALE)?,
                link: e.take_with("sigma_link", parse_link)?.unwrap_or_default(),
            },
        };
        let schedule = RampSchedule {
            warmup_epochs: e.get("warmup_epochs", 4)?,
            ramp_epochs: e.get("ramp_epochs", 4)?,
            final_value: loss.final_value(),
            ramp_floor_ratio: e.get("ramp_floor_ratio", 1e-3)?,
        };
        let finetune = if finetune_enabled {
            Some(FinetuneConfig {
                start_epoch: e.get("finetune_start", epochs.saturating_sub(10))?,
                frames: e.get("finetune_frames", 2 * frames)?,
                margin: match kind {
                    LossKind::Aam => Some(e.get("finetune_margin", 0.5)?),
                    _ => None,
                },
            })
        } else {
            None
        };
        let corpus = PopulationConfig {
            num_speakers: e.get("num_speakers", d.num_speakers)?,
            heldout_speakers: e.get("heldout_speakers", d.heldout_speakers)?,
            cohort_speakers: e.get("cohort_speakers", d.cohort_speakers)?,
            feature_dim: e.get("feature_dim", d.feature_dim)?,
            speaker_space_dim: e.get("speaker_space_dim", d.speaker_space_dim)?,
            between_scale: e.get("between_scale", d.between_scale)?,
            within_scale: e.get("within_scale", d.within_scale)?,
            frame_noise_scale: e.get("frame_noise_scale", d.frame_noise_scale)?,
            frames,
            train_frames: finetune.as_ref().map_or(frames, |f| f.frames.max(frames)),
            utts_per_speaker: e.get("utts_per_speaker", d.utts_per_speaker)?,
            heldout_utts_per_speaker: e.get("heldout_utts_per_speaker", d.heldout_utts_per_speaker)?,
            enroll_utts: e.get("enroll_utts", d.enroll_utts)?,
            hard_mode: e.take_with("hard_mode", parse_bool)?.unwrap_or(d.hard_mode),
            seed: 0,
        };
        let lda_dim: usize = e.get("lda_dim", 0)?;
        let snorm = e.take_with("snorm", parse_bool)?.unwrap_or(false);
        if !snorm {
            e.forbid(&["snorm_k"], "snorm is disabled")?;
        }
        let snorm_k = if snorm { Some(e.get("snorm_k", 20)?) } else { None };
        let mut cfg = ExperimentConfig {
            num_target_trials: e.get("num_target_trials", 400)?,
            num_nontarget_trials: e.get("num_nontarget_trials", 4000)?,
            frame_layers: e.take_with("frame_layers", parse_list)?.unwrap_or_else(|| vec![32, 32]),
            embed_dim: e.get("embed_dim", 16)?,
            loss,
            schedule,
            learning_rate: e.get("learning_rate", 0.05)?,
            final_learning_rate: e.get("final_learning_rate", 0.005)?,
            momentum: e.get("momentum", 0.9)?,
            epochs,
            batch_size: e.get("batch_size", 32)?,
            finetune,
            backend: e.get("backend", BackendKind::Cosine)?,
            preprocess: PreprocessConfig {
                length_norm: e.take_with("length_norm", parse_bool)?.unwrap_or(true),
                lda_dim: (lda_dim > 0).then_some(lda_dim),
                post_lda_norm: e.take_with("post_lda_norm", parse_bool)?.unwrap_or(false),
            },
            plda_iterations: e.get("plda_iterations", 20)?,
            snorm_k,
            metric: e.get("metric", MetricPreset::VoxCeleb)?,
            seed: e.get("seed", 1)?,
            corpus,
        };
        cfg.corpus.seed = cfg.seed;
        e.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.corpus.validate()?;
        self.schedule.validate()?;
        if self.frame_layers.is_empty() || self.frame_layers.contains(&0) || self.embed_dim == 0 {
            return bad("frame_layers and embed_dim must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        match self.loss {
            LossParams::Aam { margin, scale } => {
                crate::losses::AamConfig::new(margin, scale)?;
            }
            LossParams::Vib { beta, num_samples, .. } => {
                crate::losses::VibConfig::new(beta, num_samples, false)?;
            }
            LossParams::VibLn {
                beta,
                num_samples,
                scale,
                ..
            } => {
                crate::losses::VibConfig::new(beta, num_samples, true)?;
                if !(scale > 0.0) {
                    return bad("scale must be > 0".into());
                }
            }
            LossParams::Ce => {}
        }
        if let Some(ft) = &self.finetune {
            if ft.start_epoch >= self.epochs {
                return bad(format!(
                    "finetune_start {} must be below epochs {}",
                    ft.start_epoch, self.epochs
                ));
            }
            if ft.frames < self.corpus.frames {
                return bad("finetune_frames must be >= frames".into());
            }
            if let (Some(m), LossParams::Aam { scale, .. }) = (ft.margin, &self.loss) {
                crate::losses::AamConfig::new(m, *scale)?;
            }
        }
        if let Some(k) = self.snorm_k {
            if k < 2 {
                return bad("snorm_k must be >= 2".into());
            }
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a hash of the canonical rendering.
    pub fn hash(&self) -> u64 {
        self.to_string().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Canonical rendering; parsing it back yields an equal configuration.
impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.corpus;
        let layers: Vec<String> = self.frame_layers.iter().map(|w| w.to_string()).collect();
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "num_speakers = {}", c.num_speakers)?;
        writeln!(f, "heldout_speakers = {}", c.heldout_speakers)?;
        writeln!(f, "cohort_speakers = {}", c.cohort_speakers)?;
        writeln!(f, "feature_dim = {}", c.feature_dim)?;
        writeln!(f, "speaker_space_dim = {}", c.speaker_space_dim)?;
        writeln!(f, "between_scale = {}", c.between_scale)?;
        writeln!(f, "within_scale = {}", c.within_scale)?;
        writeln!(f, "frame_noise_scale = {}", c.frame_noise_scale)?;
        writeln!(f, "frames = {}", c.frames)?;
        writeln!(f, "utts_per_speaker = {}", c.utts_per_speaker)?;
        writeln!(f, "heldout_utts_per_speaker = {}", c.heldout_utts_per_speaker)?;
        writeln!(f, "enroll_utts = {}", c.enroll_utts)?;
        writeln!(f, "hard_mode = {}", c.hard_mode)?;
        writeln!(f, "num_target_trials = {}", self.num_target_trials)?;
        writeln!(f, "num_nontarget_trials = {}", self.num_nontarget_trials)?;
        writeln!(f, "frame_layers = {}", layers.join(","))?;
        writeln!(f, "embed_dim = {}", self.embed_dim)?;
        writeln!(f, "loss = {}", self.loss.kind())?;
        match &self.loss {
            LossParams::Ce => {}
            LossParams::Aam { margin, scale } => {
                writeln!(f, "margin = {margin}")?;
                writeln!(f, "scale = {scale}")?;
            }
            LossParams::Vib {
                beta,
                num_samples,
                link,
            } => {
                writeln!(f, "beta = {beta}")?;
                writeln!(f, "num_samples = {num_samples}")?;
                writeln!(f, "sigma_link = {}", link_token(*link))?;
            }
            LossParams::VibLn {
                beta,
                num_samples,
                scale,
                link,
            } => {
                writeln!(f, "beta = {beta}")?;
                writeln!(f, "num_samples = {num_samples}")?;
                writeln!(f, "scale = {scale}")?;
                writeln!(f, "sigma_link = {}", link_token(*link))?;
            }
        }
        if self.loss != LossParams::Ce {
            writeln!(f, "warmup_epochs = {}", self.schedule.warmup_epochs)?;
            writeln!(f, "ramp_epochs = {}", self.schedule.ramp_epochs)?;
            writeln!(f, "ramp_floor_ratio = {}", self.schedule.ramp_floor_ratio)?;
        }
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "final_learning_rate = {}", self.final_learning_rate)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "finetune = {}", self.finetune.is_some())?;
        if let Some(ft) = &self.finetune {
            writeln!(f, "finetune_start = {}", ft.start_epoch)?;
            writeln!(f, "finetune_frames = {}", ft.frames)?;
            if let Some(m) = ft.margin {
                writeln!(f, "finetune_margin = {m}")?;
            }
        }
        writeln!(f, "backend = {}", self.backend)?;
        writeln!(f, "length_norm = {}", self.preprocess.length_norm)?;
        writeln!(f, "lda_dim = {}", self.preprocess.lda_dim.unwrap_or(0))?;
        writeln!(f, "post_lda_norm = {}", self.preprocess.post_lda_norm)?;
        writeln!(f, "plda_iterations = {}", self.plda_iterations)?;
        writeln!(f, "snorm = {}", self.snorm_k.is_some())?;
        if let Some(k) = self.snorm_k {
            writeln!(f, "snorm_k = {k}")?;
        }
        writeln!(f, "metric = {}", self.metric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.loss, LossParams::Ce);
        assert_eq!(ExperimentConfig::parse(&cfg.to_string(), "x").unwrap(), cfg);
    }

    #[test]
    fn full_config_round_trip() {
        let text = "loss = vib_ln\nbeta = 0.002 # comment\nnum_samples=3\nfinetune = true\nsnorm = true\nsnorm_k = 5\nlda_dim = 6\nbackend = plda\nmetric = sre\nframe_layers = 8, 4\n";
        let cfg = ExperimentConfig::parse(text, "x").unwrap();
        assert_eq!(cfg.loss.kind(), LossKind::VibLn);
        assert_eq!(cfg.frame_layers, vec![8, 4]);
        assert_eq!(cfg.finetune.as_ref().unwrap().frames, 600);
        assert_eq!(cfg.corpus.train_frames, 600);
        assert_eq!(cfg.snorm_k, Some(5));
        assert_eq!(ExperimentConfig::parse(&cfg.to_string(), "x").unwrap(), cfg);
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = ExperimentConfig::parse("# header\nseed = 3\nepochs=abc\n", "run.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("run.cfg:3") && msg.contains("epochs") && msg.contains("abc"),
            "{msg}"
        );
    }

    #[test]
    fn rejects_irrelevant_unknown_and_duplicate_keys() {
        let err = ExperimentConfig::parse("loss = ce\nmargin = 0.2\n", "c").unwrap_err();
        assert!(err.to_string().contains("c:2"), "{err}");
        assert!(ExperimentConfig::parse("loss = aam\nbeta = 0.1\n", "c").is_err());
        assert!(ExperimentConfig::parse("loss = vib\nmargin = 0.1\n", "c").is_err());
        assert!(ExperimentConfig::parse("colour = red\n", "c").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n", "c").is_err());
        assert!(ExperimentConfig::parse("no equals sign\n", "c").is_err());
        assert!(ExperimentConfig::parse("snorm_k = 4\n", "c").is_err());
    }

    #[test]
    fn loss_fields_get_defaults() {
        let cfg = ExperimentConfig::parse("loss = aam\n", "c").unwrap();
        assert_eq!(
            cfg.loss,
            LossParams::Aam {
                margin: 0.2,
                scale: 30.0
            }
        );
        assert_eq!(cfg.schedule.final_value, 0.2);
        let cfg = ExperimentConfig::parse("loss = aam\nfinetune = true\n", "c").unwrap();
        assert_eq!(cfg.finetune.unwrap().margin, Some(0.5));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("loss = aam\nmargin = 2\n", "c").is_err());
        assert!(ExperimentConfig::parse("epochs = 0\n", "c").is_err());
        assert!(ExperimentConfig::parse("frame_layers = 4,x\n", "c").is_err());
        assert!(ExperimentConfig::parse("finetune = true\nfinetune_start = 99\n", "c").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), a.clone().with_seed(9).hash());
    }
}
