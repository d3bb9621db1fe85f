//! Discriminative (accuracy, F1) and generative (CHAIR, Hal, Cover) metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textualizer::plural;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn from_bool(yes: bool) -> Answer {
        if yes {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl BinaryScores {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> BinaryScores {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryScores {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Confusion-matrix scores with "yes" as the positive class.
pub fn binary_scores(predictions: &[Answer], gold: &[Answer]) -> Result<BinaryScores> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        match (p.is_yes(), g.is_yes()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(BinaryScores::from_counts(tp, fp, tn, fn_))
}

pub fn accuracy_f1(predictions: &[Answer], gold: &[Answer]) -> Result<(f64, f64)> {
    let s = binary_scores(predictions, gold)?;
    Ok((s.accuracy, s.f1))
}

/// Object mentions in one response, against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionExtraction {
    pub response: String,
    /// Distinct vocabulary categories, in order of first mention.
    pub mentioned: Vec<String>,
    pub gold: BTreeSet<String>,
}

impl MentionExtraction {
    pub fn hallucinated(&self) -> usize {
        self.mentioned.iter().filter(|m| !self.gold.contains(*m)).count()
    }

    pub fn covered(&self) -> usize {
        self.mentioned.iter().filter(|m| self.gold.contains(*m)).count()
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Exact vocabulary matching; a trailing plural suffix on the last word of a
/// category also matches. Longer categories win over their sub-phrases.
pub fn extract_mentions<S: AsRef<str>>(
    response: &str,
    vocabulary: &[S],
    gold: impl IntoIterator<Item = impl Into<String>>,
) -> MentionExtraction {
    let toks = words(response);
    let mut cats: Vec<(Vec<String>, &str)> = vocabulary
        .iter()
        .map(|c| (words(c.as_ref()), c.as_ref()))
        .filter(|(w, _)| !w.is_empty())
        .collect();
    cats.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    let mut mentioned: Vec<String> = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        let hit = cats.iter().find(|(cw, _)| {
            let n = cw.len();
            i + n <= toks.len() && {
                let w = &toks[i..i + n];
                let last = &cw[n - 1];
                w[..n - 1] == cw[..n - 1] && (w[n - 1] == *last || w[n - 1] == plural(last) || w[n - 1] == format!("{last}s"))
            }
        });
        match hit {
            Some((cw, name)) => {
                if !mentioned.iter().any(|m| m == name) {
                    mentioned.push(name.to_string());
                }
                i += cw.len();
            }
            None => i += 1,
        }
    }
    MentionExtraction {
        response: response.to_string(),
        mentioned,
        gold: gold.into_iter().map(Into::into).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerativeScores {
    pub chair: f64,
    pub hal: f64,
    pub cover: f64,
    pub responses: usize,
    pub mentions: usize,
    pub hallucinated: usize,
}

/// CHAIR = hallucinated / all mentions; Hal = share of responses with a
/// hallucination; Cover = covered gold objects / all gold objects.
pub fn generative_scores(extractions: &[MentionExtraction]) -> GenerativeScores {
    let mentions: usize = extractions.iter().map(|e| e.mentioned.len()).sum();
    let hallucinated: usize = extractions.iter().map(MentionExtraction::hallucinated).sum();
    let with_hal = extractions.iter().filter(|e| e.hallucinated() > 0).count();
    let covered: usize = extractions.iter().map(MentionExtraction::covered).sum();
    let gold: usize = extractions.iter().map(|e| e.gold.len()).sum();
    GenerativeScores {
        chair: ratio(hallucinated, mentions),
        hal: ratio(with_hal, extractions.len()),
        cover: ratio(covered, gold),
        responses: extractions.len(),
        mentions,
        hallucinated,
    }
}

pub fn chair_hal_cover(extractions: &[MentionExtraction]) -> (f64, f64, f64) {
    let s = generative_scores(extractions);
    (s.chair, s.hal, s.cover)
}

/// Scores for one slice of an evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub questions: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub responses: usize,
    pub chair: f64,
    pub hal: f64,
    pub cover: f64,
}

impl SplitReport {
    pub fn with_binary(mut self, s: &BinaryScores) -> SplitReport {
        self.questions = s.total();
        self.accuracy = s.accuracy;
        self.precision = s.precision;
        self.recall = s.recall;
        self.f1 = s.f1;
        self
    }

    pub fn with_generative(mut self, g: &GenerativeScores) -> SplitReport {
        self.responses = g.responses;
        self.chair = g.chair;
        self.hal = g.hal;
        self.cover = g.cover;
        self
    }

    fn ratios(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.chair,
            self.hal,
            self.cover,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub overall: SplitReport,
    pub conflict: SplitReport,
    pub non_conflict: SplitReport,
    pub tokens_per_second: f64,
}

pub const CSV_HEADER: &str = "label,split,questions,accuracy,precision,recall,f1,responses,chair,hal,cover";

impl EvalReport {
    /// Combines the discriminative fields of `self` with the generative
    /// fields of `other`.
    pub fn merged_with_generative(&self, other: &EvalReport) -> EvalReport {
        let pick = |a: &SplitReport, b: &SplitReport| SplitReport {
            responses: b.responses,
            chair: b.chair,
            hal: b.hal,
            cover: b.cover,
            ..*a
        };
        EvalReport {
            label: self.label.clone(),
            overall: pick(&self.overall, &other.overall),
            conflict: pick(&self.conflict, &other.conflict),
            non_conflict: pick(&self.non_conflict, &other.non_conflict),
            tokens_per_second: if self.tokens_per_second > 0.0 {
                self.tokens_per_second
            } else {
                other.tokens_per_second
            },
        }
    }

    pub fn check_bounds(&self) -> Result<()> {
        for (name, s) in [
            ("overall", &self.overall),
            ("conflict", &self.conflict),
            ("non_conflict", &self.non_conflict),
        ] {
            if s.ratios().iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::InvalidArgument(format!("{name} split has a ratio outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (name, s) in [
            ("overall", &self.overall),
            ("conflict", &self.conflict),
            ("non_conflict", &self.non_conflict),
        ] {
            let _ = writeln!(
                out,
                "{},{name},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
                self.label, s.questions, s.accuracy, s.precision, s.recall, s.f1, s.responses, s.chair, s.hal, s.cover
            );
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path.display(), e.to_string()))
    }

    pub fn write_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_rows());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
