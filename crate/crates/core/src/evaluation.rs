//! Set-based precision / recall / micro-F1 for identification and for full
//! event-mention detection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::AnnotatedSentence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("sentence ids do not align: only in predictions {pred_only:?}, only in gold {gold_only:?}")]
    Orphans {
        pred_only: Vec<String>,
        gold_only: Vec<String>,
    },
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("need at least 2 reports to summarize, got {0}")]
    TooFewRuns(usize),
}

/// Counts with derived precision, recall and F1. A 0/0 ratio is reported as
/// 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl Score {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Score {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            precision_undefined,
            recall_undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(flatten)]
    pub micro: Score,
    pub per_type: BTreeMap<String, Score>,
}

impl ScoreReport {
    fn from_type_counts(counts: &BTreeMap<String, [usize; 3]>) -> Self {
        let mut total = [0usize; 3];
        let per_type = counts
            .iter()
            .map(|(t, c)| {
                for k in 0..3 {
                    total[k] += c[k];
                }
                (t.clone(), Score::from_counts(c[0], c[1], c[2]))
            })
            .collect();
        ScoreReport {
            micro: Score::from_counts(total[0], total[1], total[2]),
            per_type,
        }
    }

    pub fn precision(&self) -> f64 {
        self.micro.precision
    }

    pub fn recall(&self) -> f64 {
        self.micro.recall
    }

    pub fn f1(&self) -> f64 {
        self.micro.f1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Aligned columns: one row per type, then the micro row.
    pub fn to_table(&self) -> String {
        let width = self.per_type.keys().map(String::len).chain([5]).max().unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>6}",
            "type", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        let mut row = |name: &str, s: &Score| {
            let flag = |v: f64, undefined: bool| if undefined { format!("{v:.4}*") } else { format!("{v:.4}") };
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>9}  {:>9.4}  {:>6}  {:>6}  {:>6}",
                name,
                flag(s.precision, s.precision_undefined),
                flag(s.recall, s.recall_undefined),
                s.f1,
                s.tp,
                s.fp,
                s.fn_
            );
        };
        for (name, s) in &self.per_type {
            row(name, s);
        }
        row("micro", &self.micro);
        if self.micro.precision_undefined || self.micro.recall_undefined {
            out.push_str("* undefined (0/0), reported as 0\n");
        }
        out
    }
}

fn index_by_id<'a, T>(items: &'a [(String, T)]) -> Result<BTreeMap<&'a str, &'a T>, EvaluationError> {
    let mut map = BTreeMap::new();
    for (id, v) in items {
        if map.insert(id.as_str(), v).is_some() {
            return Err(EvaluationError::DuplicateId(id.clone()));
        }
    }
    Ok(map)
}

fn align<'a, T>(
    pred: &'a [(String, T)],
    gold: &'a [(String, T)],
) -> Result<Vec<(&'a T, &'a T)>, EvaluationError> {
    let p = index_by_id(pred)?;
    let g = index_by_id(gold)?;
    let pred_only: Vec<String> = p.keys().filter(|k| !g.contains_key(*k)).map(|k| k.to_string()).collect();
    let gold_only: Vec<String> = g.keys().filter(|k| !p.contains_key(*k)).map(|k| k.to_string()).collect();
    if !pred_only.is_empty() || !gold_only.is_empty() {
        return Err(EvaluationError::Orphans { pred_only, gold_only });
    }
    Ok(p.iter().map(|(k, v)| (*v, g[k])).collect())
}

type Item = (String, usize, usize);

/// One-to-one exact matching of `(type, start, end)` triples, micro-averaged
/// over the corpus. Duplicate predictions beyond the gold multiplicity are
/// false positives.
pub fn score_mentions(pred: &[AnnotatedSentence], gold: &[AnnotatedSentence]) -> Result<ScoreReport, EvaluationError> {
    let as_items = |s: &[AnnotatedSentence]| -> Vec<(String, Vec<Item>)> {
        s.iter()
            .map(|a| {
                let items = a
                    .mentions
                    .iter()
                    .map(|m| (m.event_type.clone(), m.trigger_start, m.trigger_end))
                    .collect();
                (a.id().to_owned(), items)
            })
            .collect()
    };
    score_items(&as_items(pred), &as_items(gold))
}

fn score_items(pred: &[(String, Vec<Item>)], gold: &[(String, Vec<Item>)]) -> Result<ScoreReport, EvaluationError> {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (p, g) in align(pred, gold)? {
        let mut unmatched: HashMap<&Item, usize> = HashMap::new();
        for item in g {
            *unmatched.entry(item).or_default() += 1;
        }
        for item in p {
            let c = counts.entry(item.0.clone()).or_default();
            match unmatched.get_mut(item) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    c[0] += 1;
                }
                _ => c[1] += 1,
            }
        }
        for (item, n) in unmatched {
            counts.entry(item.0.clone()).or_default()[2] += n;
        }
    }
    Ok(ScoreReport::from_type_counts(&counts))
}

/// Micro scores over `(sentence, type)` pairs.
pub fn score_identification(
    pred: &[(String, BTreeSet<String>)],
    gold: &[(String, BTreeSet<String>)],
) -> Result<ScoreReport, EvaluationError> {
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (p, g) in align(pred, gold)? {
        for t in p.union(g) {
            let c = counts.entry(t.clone()).or_default();
            match (p.contains(t), g.contains(t)) {
                (true, true) => c[0] += 1,
                (true, false) => c[1] += 1,
                _ => c[2] += 1,
            }
        }
    }
    Ok(ScoreReport::from_type_counts(&counts))
}

/// Gold type sets keyed by sentence id.
pub fn gold_type_sets(gold: &[AnnotatedSentence]) -> Vec<(String, BTreeSet<String>)> {
    gold.iter().map(|s| (s.id().to_owned(), s.event_types())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stdev: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.stdev)
    }
}

/// Sample mean and sample (n - 1) standard deviation.
pub fn mean_stdev(values: &[f64]) -> Result<MeanStd, EvaluationError> {
    if values.len() < 2 {
        return Err(EvaluationError::TooFewRuns(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanStd { mean, stdev: var.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn summarize_runs(reports: &[ScoreReport]) -> Result<RunSummary, EvaluationError> {
    let metric = |f: fn(&ScoreReport) -> f64| mean_stdev(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunSummary {
        runs: reports.len(),
        precision: metric(ScoreReport::precision)?,
        recall: metric(ScoreReport::recall)?,
        f1: metric(ScoreReport::f1)?,
    })
}
