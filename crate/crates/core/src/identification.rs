//! Stage 1: multi-label event-type identification with a cloze prompt.
//!
//! Every ontology type is scored by the masked-LM logit of its verbalizer(s)
//! at the mask. The NULL verbalizer's logit is a per-sentence threshold: a
//! type is predicted iff it scores strictly above NULL.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{prompt_words, EncodedInput, EncoderError, EncoderOutput, MaskedLanguageModel, SegmentKind, MASK_TOKEN};
use crate::params::{flat, flat_mut, ParamSet};
use crate::types::{Ontology, Sentence, TypeScores};
use crate::verbalizer::{aggregate, aggregate_backward, softmax, Aggregation};

pub const DEFAULT_TEMPLATE: &str = "This text describes a [MASK] event.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentificationError {
    #[error("prompt template must contain exactly one {MASK_TOKEN}, found {0}")]
    MaskCount(usize),
    #[error("verbalizer `{verbalizer}` of `{event_type}` is not in the vocabulary")]
    MissingVerbalizer { event_type: String, verbalizer: String },
    #[error("null verbalizer `{0}` is not in the vocabulary")]
    MissingNullVerbalizer(String),
    #[error("input carries no mask logits")]
    NoMaskLogits,
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("margin must be positive, got {0}")]
    InvalidMargin(f64),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// A cloze template with a single mask slot, appended after the context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClozePrompt {
    template: String,
}

impl ClozePrompt {
    pub fn new(template: impl Into<String>) -> Result<Self, IdentificationError> {
        let template = template.into();
        let count = template.matches(MASK_TOKEN).count();
        if count != 1 {
            return Err(IdentificationError::MaskCount(count));
        }
        Ok(ClozePrompt { template })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn words(&self) -> Vec<String> {
        prompt_words(&self.template)
    }

    /// The template with the mask replaced by `verbalizer`.
    pub fn fill(&self, verbalizer: &str) -> String {
        self.template.replace(MASK_TOKEN, verbalizer)
    }
}

impl Default for ClozePrompt {
    fn default() -> Self {
        ClozePrompt {
            template: DEFAULT_TEMPLATE.to_owned(),
        }
    }
}

impl TryFrom<String> for ClozePrompt {
    type Error = IdentificationError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ClozePrompt::new(value)
    }
}

impl From<ClozePrompt> for String {
    fn from(p: ClozePrompt) -> String {
        p.template
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ThresholdCe,
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationLossConfig {
    pub kind: LossKind,
    pub margin: f64,
}

impl IdentificationLossConfig {
    pub fn new(kind: LossKind, margin: f64) -> Result<Self, IdentificationError> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(IdentificationError::InvalidMargin(margin));
        }
        Ok(IdentificationLossConfig { kind, margin })
    }
}

impl Default for IdentificationLossConfig {
    fn default() -> Self {
        IdentificationLossConfig {
            kind: LossKind::ThresholdCe,
            margin: 1.0,
        }
    }
}

/// Context followed by the cloze prompt; sets the mask position.
pub fn build_cloze_input(
    sentence: &Sentence,
    prompt: &ClozePrompt,
    encoder: &impl MaskedLanguageModel,
) -> Result<EncodedInput, IdentificationError> {
    let input = EncodedInput::assemble(
        encoder.vocab(),
        &sentence.tokens,
        &[(SegmentKind::Cloze, prompt.words())],
        encoder.max_seq_len(),
    )?;
    debug_assert!(input.mask_position.is_some());
    Ok(input)
}

/// Learnable mixing logits for the weighted-average aggregator, one vector
/// per type (normalized by softmax).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub names: Vec<String>,
    pub logits: Vec<Array1<f64>>,
}

impl ParamSet for AggregationWeights {
    fn zeros_like(&self) -> Self {
        AggregationWeights {
            names: self.names.clone(),
            logits: self.logits.iter().map(|l| Array1::zeros(l.len())).collect(),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (name, l) in self.names.iter().zip(&self.logits) {
            f(&format!("id_head.wavg.{name}"), flat(l));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, l) in self.names.iter().zip(&mut self.logits) {
            f(&format!("id_head.wavg.{name}"), flat_mut(l));
        }
    }

    fn visit_with(&mut self, g: &Self, f: &mut dyn FnMut(&str, &mut [f64], &[f64])) {
        for ((name, l), gl) in self.names.iter().zip(&mut self.logits).zip(&g.logits) {
            f(&format!("id_head.wavg.{name}"), flat_mut(l), flat(gl));
        }
    }
}

/// Resolved verbalizer ids for every ontology type plus the NULL id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationHead {
    pub type_names: Vec<String>,
    pub verbalizer_ids: Vec<Vec<usize>>,
    pub null_id: usize,
    pub aggregation: Aggregation,
    pub weights: AggregationWeights,
}

impl IdentificationHead {
    /// Resolves verbalizers against the encoder vocabulary. A verbalizer
    /// missing from the vocabulary whose `_`-separated parts are all present
    /// becomes a new composite token initialized from its parts.
    pub fn new(
        ontology: &Ontology,
        encoder: &mut impl MaskedLanguageModel,
        aggregation: Aggregation,
    ) -> Result<Self, IdentificationError> {
        let mut verbalizer_ids = Vec::with_capacity(ontology.len());
        for spec in &ontology.types {
            let ids = spec
                .verbalizers
                .iter()
                .map(|v| {
                    resolve_token(encoder, v).ok_or_else(|| IdentificationError::MissingVerbalizer {
                        event_type: spec.name.clone(),
                        verbalizer: v.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            verbalizer_ids.push(ids);
        }
        let null_id = encoder
            .vocab()
            .id(&ontology.null_verbalizer.to_lowercase())
            .ok_or_else(|| IdentificationError::MissingNullVerbalizer(ontology.null_verbalizer.clone()))?;
        let type_names: Vec<String> = ontology.names().map(str::to_owned).collect();
        let weights = AggregationWeights {
            names: type_names.clone(),
            logits: verbalizer_ids.iter().map(|ids| Array1::zeros(ids.len())).collect(),
        };
        Ok(IdentificationHead {
            type_names,
            verbalizer_ids,
            null_id,
            aggregation,
            weights,
        })
    }

    fn normalized_weights(&self, t: usize) -> Option<Vec<f64>> {
        (self.aggregation == Aggregation::WeightedAvg).then(|| softmax(self.weights.logits[t].as_slice().unwrap()))
    }

    /// Maps a gradient over type scores back to mask-logit gradients and
    /// aggregation-weight gradients.
    pub fn backward(
        &self,
        logits: &Array1<f64>,
        d_scores: &TypeScores,
        grads: &mut AggregationWeights,
    ) -> Vec<(usize, f64)> {
        let mut out = vec![(self.null_id, d_scores.null_score)];
        for (t, ids) in self.verbalizer_ids.iter().enumerate() {
            let g = d_scores.get(&self.type_names[t]).unwrap_or(0.0);
            if g == 0.0 {
                continue;
            }
            let values: Vec<f64> = ids.iter().map(|&i| logits[i]).collect();
            let logit_slice = self.weights.logits[t].as_slice().unwrap();
            let (d_values, d_weight_logits) = aggregate_backward(&values, self.aggregation, Some(logit_slice));
            for (&i, dv) in ids.iter().zip(d_values) {
                out.push((i, g * dv));
            }
            if let Some(dw) = d_weight_logits {
                grads.logits[t].scaled_add(g, &Array1::from(dw));
            }
        }
        out
    }
}

/// Looks a verbalizer up, creating a composite token for `a_b` forms.
pub fn resolve_token(encoder: &mut impl MaskedLanguageModel, verbalizer: &str) -> Option<usize> {
    let lowered = verbalizer.to_lowercase();
    if let Some(id) = encoder.vocab().id(&lowered) {
        return Some(id);
    }
    let parts: Vec<&str> = lowered.split(['_', ' ', '-']).filter(|p| !p.is_empty()).collect();
    if parts.len() < 2 || !parts.iter().all(|p| encoder.vocab().contains(p)) {
        return None;
    }
    encoder.add_token(&lowered, &parts).ok()
}

/// Aggregates verbalizer logits at the mask into one score per type.
/// Vocabulary entries that map to no type are never read.
pub fn score_event_types(output: &EncoderOutput, head: &IdentificationHead) -> Result<TypeScores, IdentificationError> {
    let logits = output.vocab_logits_at_mask.as_ref().ok_or(IdentificationError::NoMaskLogits)?;
    Ok(score_from_logits(logits, head))
}

pub fn score_from_logits(logits: &Array1<f64>, head: &IdentificationHead) -> TypeScores {
    let scores = head
        .verbalizer_ids
        .iter()
        .enumerate()
        .map(|(t, ids)| {
            let values: Vec<f64> = ids.iter().map(|&i| logits[i]).collect();
            let weights = head.normalized_weights(t);
            let score = aggregate(&values, head.aggregation, weights.as_deref()).expect("verbalizer lists are non-empty");
            (head.type_names[t].clone(), score)
        })
        .collect();
    TypeScores::new(scores, logits[head.null_id])
}

/// Types scoring strictly above NULL; ties decode as negative.
pub fn decode_identification(scores: &TypeScores) -> BTreeSet<String> {
    scores
        .scores
        .iter()
        .filter(|(_, &s)| s > scores.null_score)
        .map(|(t, _)| t.clone())
        .collect()
}

/// Single-label probability: softmax over type scores, NULL excluded.
pub fn classification_probability(scores: &TypeScores, label: &str) -> Result<f64, IdentificationError> {
    let target = scores.get(label).ok_or_else(|| IdentificationError::UnknownLabel(label.to_owned()))?;
    let max = scores.scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.scores.values().map(|s| (s - max).exp()).sum();
    Ok((target - max).exp() / z)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zero_grad(scores: &TypeScores) -> TypeScores {
    TypeScores::new(scores.scores.keys().map(|k| (k.clone(), 0.0)).collect(), 0.0)
}

/// ThresholdCE with its gradient w.r.t. every logit.
///
/// `L_pos = -(1/|T|) sum_t log sigma(s_t - s_null)` pairs each positive with
/// NULL only; `L_neg = -log softmax_null({null} + negatives)` pools NULL with
/// all negatives. `L_pos` is zero for NULL instances.
pub fn threshold_ce_loss_and_grad(scores: &TypeScores, gold: &BTreeSet<String>) -> (f64, TypeScores) {
    let null = scores.null_score;
    let mut grad = zero_grad(scores);
    let positives: Vec<(&String, f64)> = scores.scores.iter().filter(|(t, _)| gold.contains(*t)).map(|(t, &s)| (t, s)).collect();
    let negatives: Vec<(&String, f64)> = scores.scores.iter().filter(|(t, _)| !gold.contains(*t)).map(|(t, &s)| (t, s)).collect();

    let mut loss = 0.0;
    if !positives.is_empty() {
        let n = positives.len() as f64;
        for &(t, s) in &positives {
            loss += softplus(null - s) / n;
            let p = sigmoid(null - s) / n;
            *grad.scores.get_mut(t).unwrap() -= p;
            grad.null_score += p;
        }
    }

    let max = negatives.iter().map(|&(_, s)| s).fold(null, f64::max);
    let z: f64 = (null - max).exp() + negatives.iter().map(|&(_, s)| (s - max).exp()).sum::<f64>();
    loss += max + z.ln() - null;
    grad.null_score += (null - max).exp() / z - 1.0;
    for &(t, s) in &negatives {
        *grad.scores.get_mut(t).unwrap() += (s - max).exp() / z;
    }
    (loss, grad)
}

pub fn threshold_ce_loss(scores: &TypeScores, gold: &BTreeSet<String>) -> f64 {
    threshold_ce_loss_and_grad(scores, gold).0
}

/// Hinge ranking loss against NULL, averaged over all types.
pub fn margin_loss_and_grad(scores: &TypeScores, gold: &BTreeSet<String>, margin: f64) -> (f64, TypeScores) {
    let null = scores.null_score;
    let mut grad = zero_grad(scores);
    let n = scores.scores.len().max(1) as f64;
    let mut loss = 0.0;
    for (t, &s) in &scores.scores {
        let (gap, sign) = if gold.contains(t) { (s - null, 1.0) } else { (null - s, -1.0) };
        let hinge = margin - gap;
        if hinge > 0.0 {
            loss += hinge / n;
            *grad.scores.get_mut(t).unwrap() -= sign / n;
            grad.null_score += sign / n;
        }
    }
    (loss, grad)
}

pub fn margin_loss(scores: &TypeScores, gold: &BTreeSet<String>, margin: f64) -> f64 {
    margin_loss_and_grad(scores, gold, margin).0
}

pub fn identification_loss_and_grad(
    scores: &TypeScores,
    gold: &BTreeSet<String>,
    config: &IdentificationLossConfig,
) -> (f64, TypeScores) {
    match config.kind {
        LossKind::ThresholdCe => threshold_ce_loss_and_grad(scores, gold),
        LossKind::Margin => margin_loss_and_grad(scores, gold, config.margin),
    }
}

/// Convenience for building scores in tests and fixtures.
pub fn type_scores<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>, null: f64) -> TypeScores {
    let scores: BTreeMap<String, f64> = pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    TypeScores::new(scores, null)
}
