//! Whitespace-separated text formats for features, embeddings, trials,
//! enrollment maps, manifests, and scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::backend::EmbeddingSet;
use crate::error::{Error, Result};
use crate::model::FeatureMatrix;
use crate::synth::{Corpus, EnrollModel, Split, Trial, TrialList};

const NO_SPEAKER: &str = "-";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
struct Lines<'a> {
    file: &'a str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(file: &'a str, text: &'a str) -> Self {
        Self {
            file,
            inner: text.lines().enumerate(),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line,
            msg: msg.into(),
        }
    }
}

impl<'a> Iterator for Lines<'a> {
    type Item = (usize, Vec<&'a str>);

    fn next(&mut self) -> Option<Self::Item> {
        for (i, line) in self.inner.by_ref() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !fields.is_empty() {
                return Some((i + 1, fields));
            }
        }
        None
    }
}

fn parse_num<T: std::str::FromStr>(lines: &Lines, line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| lines.err(line, format!("invalid {what} `{tok}`")))
}

fn speaker_field(s: &Option<String>) -> &str {
    s.as_deref().unwrap_or(NO_SPEAKER)
}

fn parse_speaker(tok: &str) -> Option<String> {
    (tok != NO_SPEAKER).then(|| tok.to_string())
}

pub fn format_features(utts: &[&FeatureMatrix]) -> String {
    let mut out = String::new();
    for u in utts {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            u.utterance_id,
            speaker_field(&u.speaker_id),
            u.num_frames(),
            u.dim()
        );
        for row in u.frames.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn parse_features(file: &str, text: &str) -> Result<Vec<FeatureMatrix>> {
    let mut lines = Lines::new(file, text);
    let mut out = Vec::new();
    while let Some((ln, head)) = lines.next() {
        if head.len() != 4 {
            return Err(lines.err(ln, "expected header `utterance_id speaker_id T D`"));
        }
        let t: usize = parse_num(&lines, ln, head[2], "frame count")?;
        let d: usize = parse_num(&lines, ln, head[3], "feature dim")?;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            let (rl, row) = lines
                .next()
                .ok_or_else(|| lines.err(ln, format!("utterance {} is truncated", head[0])))?;
            if row.len() != d {
                return Err(lines.err(rl, format!("expected {d} values, found {}", row.len())));
            }
            for tok in row {
                data.push(parse_num::<f64>(&lines, rl, tok, "feature value")?);
            }
        }
        let frames = DMatrix::from_row_slice(t, d, &data);
        let utt = FeatureMatrix::new(head[0].to_string(), parse_speaker(head[1]), frames)
            .map_err(|e| lines.err(ln, e.to_string()))?;
        out.push(utt);
    }
    Ok(out)
}

pub fn format_embeddings(set: &EmbeddingSet) -> String {
    let mut out = String::new();
    for i in 0..set.len() {
        let _ = write!(out, "{} {}", set.ids[i], speaker_field(&set.speakers[i]));
        for v in set.matrix.row(i).iter() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(file: &str, text: &str) -> Result<EmbeddingSet> {
    let lines = Lines::new(file, text);
    let (mut ids, mut speakers, mut data) = (Vec::new(), Vec::new(), Vec::new());
    let mut dim = None;
    for (ln, f) in Lines::new(file, text) {
        if f.len() < 3 {
            return Err(lines.err(ln, "expected `utterance_id speaker_id values...`"));
        }
        let d = f.len() - 2;
        if *dim.get_or_insert(d) != d {
            return Err(lines.err(ln, format!("expected {} values, found {d}", dim.unwrap())));
        }
        ids.push(f[0].to_string());
        speakers.push(parse_speaker(f[1]));
        for tok in &f[2..] {
            data.push(parse_num::<f64>(&lines, ln, tok, "embedding value")?);
        }
    }
    if ids.is_empty() {
        return Err(Error::Empty("embedding file"));
    }
    let matrix = DMatrix::from_row_slice(ids.len(), dim.unwrap_or(0), &data);
    EmbeddingSet::new(ids, speakers, matrix)
}

fn label_token(target: bool) -> &'static str {
    if target {
        "target"
    } else {
        "nontarget"
    }
}

fn parse_label(lines: &Lines, ln: usize, tok: &str) -> Result<bool> {
    match tok {
        "target" => Ok(true),
        "nontarget" => Ok(false),
        _ => Err(lines.err(ln, format!("invalid label `{tok}`"))),
    }
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", t.enroll, t.test, label_token(t.target)))
        .collect()
}

pub fn parse_trials(file: &str, text: &str) -> Result<TrialList> {
    let lines = Lines::new(file, text);
    Lines::new(file, text)
        .map(|(ln, f)| {
            if f.len() != 3 {
                return Err(lines.err(ln, "expected `enroll_id test_id target|nontarget`"));
            }
            Ok(Trial {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                target: parse_label(&lines, ln, f[2])?,
            })
        })
        .collect()
}

/// Two columns: model id, utterance id; one line per enrollment utterance.
pub fn format_enroll_map(models: &[EnrollModel]) -> String {
    let mut out = String::new();
    for m in models {
        for u in &m.utterances {
            let _ = writeln!(out, "{} {}", m.id, u);
        }
    }
    out
}

/// Model ids in first-appearance order with their utterances.
pub fn parse_enroll_map(file: &str, text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let lines = Lines::new(file, text);
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (ln, f) in Lines::new(file, text) {
        if f.len() != 2 {
            return Err(lines.err(ln, "expected `enroll_id utterance_id`"));
        }
        match out.iter_mut().find(|(id, _)| id == f[0]) {
            Some((_, utts)) => utts.push(f[1].to_string()),
            None => out.push((f[0].to_string(), vec![f[1].to_string()])),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
}

pub fn format_manifest(corpus: &Corpus) -> String {
    corpus
        .utterances
        .iter()
        .zip(&corpus.splits)
        .map(|(u, s)| format!("{} {} {}\n", u.utterance_id, speaker_field(&u.speaker_id), s))
        .collect()
}

pub fn parse_manifest(file: &str, text: &str) -> Result<Vec<ManifestEntry>> {
    let lines = Lines::new(file, text);
    Lines::new(file, text)
        .map(|(ln, f)| {
            if f.len() != 3 {
                return Err(lines.err(ln, "expected `utterance_id speaker_id split`"));
            }
            Ok(ManifestEntry {
                utterance_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                split: f[2].parse().map_err(|e: Error| lines.err(ln, e.to_string()))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub target: Option<bool>,
}

pub fn format_scores(records: &[ScoreRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let label = r.target.map_or(NO_SPEAKER, label_token);
            format!("{} {} {} {}\n", r.enroll, r.test, r.score, label)
        })
        .collect()
}

pub fn parse_scores(file: &str, text: &str) -> Result<Vec<ScoreRecord>> {
    let lines = Lines::new(file, text);
    Lines::new(file, text)
        .map(|(ln, f)| {
            if f.len() != 3 && f.len() != 4 {
                return Err(lines.err(ln, "expected `enroll_id test_id score label`"));
            }
            let score: f64 = parse_num(&lines, ln, f[2], "score")?;
            if !score.is_finite() {
                return Err(lines.err(ln, "non-finite score"));
            }
            let target = match f.get(3) {
                None | Some(&"-") => None,
                Some(tok) => Some(parse_label(&lines, ln, tok)?),
            };
            Ok(ScoreRecord {
                enroll: f[0].to_string(),
                test: f[1].to_string(),
                score,
                target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, make_trials, PopulationConfig};

    fn corpus() -> Corpus {
        generate(&PopulationConfig {
            num_speakers: 3,
            heldout_speakers: 2,
            cohort_speakers: 1,
            frames: 4,
            train_frames: 4,
            utts_per_speaker: 2,
            heldout_utts_per_speaker: 3,
            ..PopulationConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn features_round_trip_exactly() {
        let c = corpus();
        let refs: Vec<_> = c.utterances.iter().collect();
        let text = format_features(&refs);
        assert_eq!(parse_features("f", &text).unwrap(), c.utterances);
    }

    #[test]
    fn truncated_features_report_line() {
        let err = parse_features("f.txt", "u1 s1 2 2\n1 2\n3\n").unwrap_err();
        assert!(err.to_string().contains("f.txt:3"), "{err}");
        assert!(parse_features("f", "u1 s1 3 1\n1\n").is_err());
    }

    #[test]
    fn embeddings_round_trip_bitwise() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1e-300, 1.0 / 3.0, 2.5e10, 0.0, -7.25]);
        let set = EmbeddingSet::new(vec!["a".into(), "b".into()], vec![Some("s".into()), None], m).unwrap();
        let text = format_embeddings(&set);
        assert!(text.starts_with("a s 0.1"));
        assert!(text.contains("\nb - "));
        assert_eq!(parse_embeddings("e", &text).unwrap(), set);
    }

    #[test]
    fn ragged_embeddings_rejected() {
        let err = parse_embeddings("e", "a - 1 2\nb - 1\n").unwrap_err();
        assert!(err.to_string().contains("e:2"), "{err}");
        assert!(parse_embeddings("e", "a - 1 x\n").is_err());
        assert!(parse_embeddings("e", "").is_err());
    }

    #[test]
    fn trials_and_map_round_trip() {
        let c = corpus();
        let trials = make_trials(&c, 2, 3, 1).unwrap();
        assert_eq!(parse_trials("t", &format_trials(&trials)).unwrap(), trials);
        let map = parse_enroll_map("m", &format_enroll_map(&c.enroll_models)).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map[0].0, c.enroll_models[0].id);
        assert!(parse_trials("t", "a b maybe\n").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let c = corpus();
        let entries = parse_manifest("m", &format_manifest(&c)).unwrap();
        assert_eq!(entries.len(), c.utterances.len());
        assert_eq!(entries.iter().filter(|e| e.split == Split::Cohort).count(), 2);
    }

    #[test]
    fn scores_round_trip() {
        let recs = vec![
            ScoreRecord {
                enroll: "a".into(),
                test: "b".into(),
                score: 0.1 + 0.2,
                target: Some(true),
            },
            ScoreRecord {
                enroll: "a".into(),
                test: "c".into(),
                score: -3.0,
                target: None,
            },
        ];
        assert_eq!(parse_scores("s", &format_scores(&recs)).unwrap(), recs);
        assert!(parse_scores("s", "a b NaN target\n").is_err());
    }
}
