//! Trial scoring and evaluation: cosine similarity, equal error rate with a
//! fixed tie convention, Cavg for language identification, and pooled
//! detection EER.
//!
//! Conventions frozen here so numbers reproduce bit-for-bit:
//! - a trial is accepted when `score >= threshold`;
//! - the EER sweep visits every distinct score as a threshold, descending,
//!   starting from a virtual accept-nothing point;
//! - when miss and false-alarm rates cross between adjacent sweep points the
//!   rates are interpolated linearly in ROC space;
//! - Cavg uses P_target = 0.5 with pairwise false-alarm averaging and
//!   per-language threshold 0.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// One verification trial: an (enrollment, test) pair with its truth label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Trial list; EER needs at least one target and one non-target.
#[derive(Debug, Clone, Default)]
pub struct TrialList(pub Vec<Trial>);

/// Labeled scores, one per trial.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    /// (is_target, score) per trial.
    pub entries: Vec<(bool, f64)>,
}

impl ScoreSet {
    fn validate(&self) -> Result<()> {
        let targets = self.entries.iter().filter(|(t, _)| *t).count();
        if targets == 0 || targets == self.entries.len() {
            return Err(Error::DegenerateTrials);
        }
        Ok(())
    }
}

/// Cosine similarity in [-1, 1]; rejects zero-norm inputs.
pub fn cosine_score(e1: &[f64], e2: &[f64]) -> Result<f64> {
    debug_assert_eq!(e1.len(), e2.len());
    let n1: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2: f64 = e2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok(dot / (n1 * n2))
}

/// Equal error rate and the threshold near the crossing.
///
/// Sweeps all distinct scores as thresholds (accept on `score >= threshold`),
/// then interpolates the miss/false-alarm step functions linearly between
/// the adjacent operating points where they cross.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    scores.validate()?;
    let n_targets = scores.entries.iter().filter(|(t, _)| *t).count();
    let n_nontargets = scores.entries.len() - n_targets;

    // sort descending by score; walk thresholds from high to low
    let mut sorted: Vec<(bool, f64)> = scores.entries.clone();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));

    // virtual starting point: threshold above every score accepts nothing
    let mut accepted_targets = 0usize;
    let mut accepted_nontargets = 0usize;
    let mut prev_miss = 1.0f64;
    let mut prev_fa = 0.0f64;
    let mut prev_thr = f64::INFINITY;

    let mut i = 0;
    while i < sorted.len() {
        let thr = sorted[i].1;
        // absorb the whole tie group at this threshold
        while i < sorted.len() && sorted[i].1 == thr {
            if sorted[i].0 {
                accepted_targets += 1;
            } else {
                accepted_nontargets += 1;
            }
            i += 1;
        }
        let miss = (n_targets - accepted_targets) as f64 / n_targets as f64;
        let fa = accepted_nontargets as f64 / n_nontargets as f64;

        if miss == fa {
            return Ok((miss, thr));
        }
        if miss < fa {
            // crossed between the previous point and this one
            let t = (prev_miss - prev_fa) / ((prev_miss - prev_fa) - (miss - fa));
            let value = prev_miss + t * (miss - prev_miss);
            let threshold = if prev_thr.is_infinite() {
                thr
            } else {
                prev_thr + t * (thr - prev_thr)
            };
            return Ok((value, threshold));
        }
        prev_miss = miss;
        prev_fa = fa;
        prev_thr = thr;
    }
    // miss reaches 0 and fa reaches 1 at the lowest threshold, so the sweep
    // always crosses; reaching here means every score was accepted already
    unreachable!("EER sweep must cross");
}

/// Per-utterance language score table. `rows` hold the utterance id, the
/// index of the true language, and one score per language.
#[derive(Debug, Clone, Default)]
pub struct LidScores {
    pub languages: Vec<String>,
    pub rows: Vec<LidRow>,
}

#[derive(Debug, Clone)]
pub struct LidRow {
    pub utterance: String,
    pub label: usize,
    pub scores: Vec<f64>,
}

impl LidScores {
    fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(Error::InvalidConfig {
                key: "lid.languages".into(),
                reason: format!("need >= 2 languages, got {}", self.languages.len()),
            });
        }
        if self.rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for row in &self.rows {
            if row.scores.len() != self.languages.len() {
                return Err(Error::MissingLanguage(format!(
                    "utterance {} has {} scores for {} languages",
                    row.utterance,
                    row.scores.len(),
                    self.languages.len()
                )));
            }
            if row.label >= self.languages.len() {
                return Err(Error::LabelOutOfRange {
                    got: row.label,
                    classes: self.languages.len(),
                });
            }
        }
        Ok(())
    }
}

/// Cavg at an explicit decision threshold (accept when score >= threshold).
pub fn cavg_at_threshold(table: &LidScores, threshold: f64) -> Result<f64> {
    table.validate()?;
    let n = table.languages.len();
    let p_target = 0.5;
    let mut total = 0.0;
    for target in 0..n {
        let labeled: Vec<&LidRow> = table.rows.iter().filter(|r| r.label == target).collect();
        let p_miss = if labeled.is_empty() {
            0.0
        } else {
            labeled
                .iter()
                .filter(|r| r.scores[target] < threshold)
                .count() as f64
                / labeled.len() as f64
        };
        let mut fa_sum = 0.0;
        for other in 0..n {
            if other == target {
                continue;
            }
            let others: Vec<&LidRow> = table.rows.iter().filter(|r| r.label == other).collect();
            let p_fa = if others.is_empty() {
                0.0
            } else {
                others
                    .iter()
                    .filter(|r| r.scores[target] >= threshold)
                    .count() as f64
                    / others.len() as f64
            };
            fa_sum += p_fa;
        }
        total += p_target * p_miss + (1.0 - p_target) / (n - 1) as f64 * fa_sum;
    }
    Ok(total / n as f64)
}

/// Average detection cost with the fixed conventions documented above.
pub fn cavg(table: &LidScores) -> Result<f64> {
    cavg_at_threshold(table, 0.0)
}

/// Pool all (utterance, language) pairs into one detection trial set and
/// apply [`eer`]: target when the language matches the label.
pub fn lid_detection_eer(table: &LidScores) -> Result<f64> {
    table.validate()?;
    let mut set = ScoreSet::default();
    for row in &table.rows {
        for (lang, &score) in row.scores.iter().enumerate() {
            set.entries.push((lang == row.label, score));
        }
    }
    Ok(eer(&set)?.0)
}

// --- file formats ---

/// Parse a trial list: one `label enroll_id test_id` per line with label in
/// {target, nontarget}.
pub fn parse_trials<R: BufRead>(reader: R, path: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: idx + 1,
                reason: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let target = match fields[0] {
            "target" => true,
            "nontarget" => false,
            other => {
                return Err(Error::MalformedLine {
                    path: path.into(),
                    line: idx + 1,
                    reason: format!("label must be target|nontarget, got {other}"),
                })
            }
        };
        trials.push(Trial {
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
            target,
        });
    }
    Ok(TrialList(trials))
}

pub fn write_trials<W: Write>(writer: &mut W, trials: &TrialList) -> Result<()> {
    for t in &trials.0 {
        let label = if t.target { "target" } else { "nontarget" };
        writeln!(writer, "{} {} {}", label, t.enroll, t.test)?;
    }
    Ok(())
}

/// Parse a score file: one `enroll_id test_id score` per line.
pub fn parse_scores<R: BufRead>(reader: R, path: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: idx + 1,
                reason: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let score: f64 = fields[2].parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: idx + 1,
            reason: format!("bad score {}", fields[2]),
        })?;
        out.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    Ok(out)
}

pub fn write_scores<W: Write>(writer: &mut W, scores: &[(String, String, f64)]) -> Result<()> {
    for (enroll, test, score) in scores {
        writeln!(writer, "{enroll} {test} {score}")?;
    }
    Ok(())
}

/// Join trials with their scores by (enroll, test); every trial must be
/// covered.
pub fn join_scores(trials: &TrialList, scores: &[(String, String, f64)]) -> Result<ScoreSet> {
    let mut map = HashMap::with_capacity(scores.len());
    for (enroll, test, score) in scores {
        map.insert((enroll.as_str(), test.as_str()), *score);
    }
    let mut set = ScoreSet::default();
    for t in &trials.0 {
        match map.get(&(t.enroll.as_str(), t.test.as_str())) {
            Some(&score) => set.entries.push((t.target, score)),
            None => {
                return Err(Error::MissingScore {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                })
            }
        }
    }
    Ok(set)
}

/// Parse a LID score table: a header of language ids, then one
/// `utt_id label score_1 ... score_N` row per utterance.
pub fn parse_lid_table<R: BufRead>(reader: R, path: &str) -> Result<LidScores> {
    let mut lines = reader.lines().enumerate();
    let languages: Vec<String> = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break line.split_whitespace().map(str::to_string).collect();
            }
            None => {
                return Err(Error::MalformedLine {
                    path: path.into(),
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + languages.len() {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: idx + 1,
                reason: format!(
                    "expected {} fields, got {}",
                    2 + languages.len(),
                    fields.len()
                ),
            });
        }
        let label = languages
            .iter()
            .position(|l| l == fields[1])
            .ok_or_else(|| Error::MalformedLine {
                path: path.into(),
                line: idx + 1,
                reason: format!("unknown language label {}", fields[1]),
            })?;
        let mut scores = Vec::with_capacity(languages.len());
        for f in &fields[2..] {
            scores.push(f.parse().map_err(|_| Error::MalformedLine {
                path: path.into(),
                line: idx + 1,
                reason: format!("bad score {f}"),
            })?);
        }
        rows.push(LidRow {
            utterance: fields[0].to_string(),
            label,
            scores,
        });
    }
    Ok(LidScores { languages, rows })
}

pub fn write_lid_table<W: Write>(writer: &mut W, table: &LidScores) -> Result<()> {
    writeln!(writer, "{}", table.languages.join(" "))?;
    for row in &table.rows {
        let scores = row
            .scores
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(
            writer,
            "{} {} {}",
            row.utterance, table.languages[row.label], scores
        )?;
    }
    Ok(())
}
