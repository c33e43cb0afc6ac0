//! Automatic verbalizer selection by reciprocal-rank scoring, and the
//! multi-verbalizer aggregation operators.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::MaskedLanguageModel;
use crate::identification::{build_cloze_input, ClozePrompt, IdentificationError};
use crate::types::{AnnotatedSentence, Ontology, Sentence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerbalizerError {
    #[error("cannot aggregate an empty score list")]
    Empty,
    #[error("weighted average needs weights, other operators take none")]
    WeightsMismatch,
    #[error("weights must be non-negative, match the scores in length and sum to 1")]
    BadWeights,
    #[error("top_n must be at least 1")]
    InvalidTopN,
    #[error("no fallback verbalizer for `{0}`: none of its name tokens are in the vocabulary")]
    NoFallback(String),
    #[error(transparent)]
    Identification(#[from] IdentificationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[serde(rename = "avg")]
    Avg,
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "logsumexp")]
    LogSumExp,
    #[serde(rename = "wavg")]
    WeightedAvg,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(Aggregation::Avg),
            "max" => Ok(Aggregation::Max),
            "logsumexp" => Ok(Aggregation::LogSumExp),
            "wavg" | "weighted-avg" => Ok(Aggregation::WeightedAvg),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Reduces one type's verbalizer scores to a single score.
pub fn aggregate(scores: &[f64], method: Aggregation, weights: Option<&[f64]>) -> Result<f64, VerbalizerError> {
    if scores.is_empty() {
        return Err(VerbalizerError::Empty);
    }
    match (method, weights) {
        (Aggregation::WeightedAvg, Some(w)) => {
            let sum: f64 = w.iter().sum();
            if w.len() != scores.len() || w.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(VerbalizerError::BadWeights);
            }
            Ok(scores.iter().zip(w).map(|(s, w)| s * w).sum())
        }
        (Aggregation::WeightedAvg, None) | (_, Some(_)) => Err(VerbalizerError::WeightsMismatch),
        (Aggregation::Avg, None) => Ok(scores.iter().sum::<f64>() / scores.len() as f64),
        (Aggregation::Max, None) => Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        (Aggregation::LogSumExp, None) => Ok(logsumexp(scores)),
    }
}

/// Gradient of [`aggregate`] w.r.t. the scores and, for the weighted
/// average, w.r.t. the unnormalized weight logits.
pub fn aggregate_backward(
    scores: &[f64],
    method: Aggregation,
    weight_logits: Option<&[f64]>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let n = scores.len();
    match method {
        Aggregation::Avg => (vec![1.0 / n as f64; n], None),
        Aggregation::Max => {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            let mut d = vec![0.0; n];
            d[best] = 1.0;
            (d, None)
        }
        Aggregation::LogSumExp => (softmax(scores), None),
        Aggregation::WeightedAvg => {
            let w = match weight_logits {
                Some(l) => softmax(l),
                None => vec![1.0 / n as f64; n],
            };
            let value: f64 = scores.iter().zip(&w).map(|(s, w)| s * w).sum();
            let d_logits = scores.iter().zip(&w).map(|(s, w)| w * (s - value)).collect();
            (w, Some(d_logits))
        }
    }
}

/// Lowercased trigger words of the training set; multi-word triggers
/// contribute each of their words.
pub fn collect_candidates(train: &[AnnotatedSentence]) -> BTreeSet<String> {
    let mut candidates = BTreeSet::new();
    for s in train {
        for m in &s.mentions {
            for word in &s.sentence.tokens[m.trigger_start..=m.trigger_end] {
                candidates.insert(word.to_lowercase());
            }
        }
    }
    if candidates.is_empty() {
        warn!("no trigger words in the training set; the candidate verbalizer set is empty");
    }
    candidates
}

/// Ranks in-vocabulary candidates by their mask logit for one sentence.
/// Rank 1 is the highest logit; ties go to the lexicographically smaller
/// candidate.
pub fn rank_candidates(
    sentence: &Sentence,
    prompt: &ClozePrompt,
    candidates: &BTreeSet<String>,
    encoder: &impl MaskedLanguageModel,
) -> Result<BTreeMap<String, usize>, VerbalizerError> {
    let input = build_cloze_input(sentence, prompt, encoder)?;
    let output = encoder.encode(&input).map_err(IdentificationError::from)?;
    let logits = output.vocab_logits_at_mask.ok_or(IdentificationError::NoMaskLogits)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        match encoder.vocab().id(c) {
            Some(id) => scored.push((c, logits[id])),
            None => warn!("candidate `{c}` is not in the vocabulary; excluded"),
        }
    }
    Ok(rank_by_logit(scored))
}

pub(crate) fn rank_by_logit(mut scored: Vec<(&String, f64)>) -> BTreeMap<String, usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.into_iter().enumerate().map(|(i, (c, _))| (c.clone(), i + 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateTable {
    pub candidates: BTreeSet<String>,
    /// `(sentence id, candidate) -> rank`, 1-based among candidates.
    pub per_instance_ranks: BTreeMap<(String, String), usize>,
}

impl CandidateTable {
    /// Ranks every candidate on every sentence with a frozen encoder.
    pub fn build(
        sentences: &[AnnotatedSentence],
        prompt: &ClozePrompt,
        candidates: &BTreeSet<String>,
        encoder: &(impl MaskedLanguageModel + Sync),
    ) -> Result<Self, VerbalizerError> {
        let in_vocab: BTreeSet<String> = candidates.iter().filter(|c| encoder.vocab().contains(c)).cloned().collect();
        let ranked = sentences
            .par_iter()
            .map(|s| rank_candidates(&s.sentence, prompt, &in_vocab, encoder).map(|r| (s.id().to_owned(), r)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut per_instance_ranks = BTreeMap::new();
        for (id, ranks) in ranked {
            for (c, r) in ranks {
                per_instance_ranks.insert((id.clone(), c), r);
            }
        }
        Ok(CandidateTable {
            candidates: in_vocab,
            per_instance_ranks,
        })
    }

    pub fn rank(&self, sentence_id: &str, candidate: &str) -> Option<usize> {
        self.per_instance_ranks.get(&(sentence_id.to_owned(), candidate.to_owned())).copied()
    }
}

/// Reciprocal-rank score of `candidate` for `event_type`: the sum of
/// `1 / rank` over instances labelled with that type. Labels are sets so
/// multi-event sentences count toward each of their types.
pub fn score_candidate(
    candidate: &str,
    event_type: &str,
    table: &CandidateTable,
    labels: &BTreeMap<String, BTreeSet<String>>,
) -> f64 {
    labels
        .iter()
        .filter(|(_, types)| types.contains(event_type))
        .filter_map(|(id, _)| table.rank(id, candidate))
        .map(|r| 1.0 / r as f64)
        .sum()
}

/// Picks up to `top_n` verbalizers per type by reciprocal-rank score, ties
/// broken lexicographically. A type with no positively scored candidate
/// falls back to its own name, registered as a (possibly composite) token.
pub fn select_verbalizers<E: MaskedLanguageModel + Sync>(
    train: &[AnnotatedSentence],
    ontology: &Ontology,
    encoder: &mut E,
    prompt: &ClozePrompt,
    top_n: usize,
) -> Result<BTreeMap<String, Vec<String>>, VerbalizerError> {
    if top_n == 0 {
        return Err(VerbalizerError::InvalidTopN);
    }
    let mut candidates = collect_candidates(train);
    candidates.remove(&ontology.null_verbalizer.to_lowercase());
    let table = CandidateTable::build(train, prompt, &candidates, &*encoder)?;
    let labels: BTreeMap<String, BTreeSet<String>> =
        train.iter().map(|s| (s.id().to_owned(), s.event_types())).collect();

    let mut selection = BTreeMap::new();
    for name in ontology.names() {
        let mut scored: Vec<(&String, f64)> = table
            .candidates
            .iter()
            .map(|c| (c, score_candidate(c, name, &table, &labels)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut chosen: Vec<String> = scored.into_iter().take(top_n).map(|(c, _)| c.clone()).collect();
        if chosen.is_empty() {
            chosen.push(fallback_verbalizer(name, encoder)?);
        }
        selection.insert(name.to_owned(), chosen);
    }
    Ok(selection)
}

fn fallback_verbalizer(name: &str, encoder: &mut impl MaskedLanguageModel) -> Result<String, VerbalizerError> {
    let parts: Vec<String> = name
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(str::to_lowercase)
        .filter(|p| encoder.vocab().contains(p))
        .collect();
    match parts.len() {
        0 => Err(VerbalizerError::NoFallback(name.to_owned())),
        1 => Ok(parts[0].clone()),
        _ => {
            let surface = parts.join("_");
            let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
            encoder
                .add_token(&surface, &refs)
                .map_err(|e| VerbalizerError::Identification(e.into()))?;
            Ok(surface)
        }
    }
}

/// Writes a selection back into an ontology.
pub fn apply_selection(ontology: &Ontology, selection: &BTreeMap<String, Vec<String>>) -> Ontology {
    let mut out = ontology.clone();
    for spec in &mut out.types {
        if let Some(v) = selection.get(&spec.name) {
            spec.verbalizers = v.clone();
        }
    }
    out
}
