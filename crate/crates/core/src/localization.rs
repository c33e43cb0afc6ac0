//! Stage 2: type-conditioned trigger localization with a three-tag
//! linear-chain CRF.
//!
//! The input is the context, the cloze prompt filled with the type's
//! verbalizer, and optional type knowledge (definition or keywords). Only
//! the first subtoken of each context word is tagged. Emissions fuse a
//! token's own projection with an attention-weighted sum of projections of
//! all key positions:
//!
//! ```text
//! phi_i  = W_l h_i + sum_j alpha_ij W_v h_j
//! alpha_ij = softmax_j((W_q h_i) . (W_k h_j) / sqrt(m))
//! ```

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bio::{bio_to_spans, is_well_formed};
use crate::encoder::{prompt_words, EncodedInput, EncoderError, MaskedLanguageModel, SegmentKind};
use crate::identification::ClozePrompt;
use crate::params::{flat, flat_mut, ParamSet};
use crate::types::{BioTag, EventMention, EventTypeSpec, Sentence, DEFAULT_MAX_KEYWORDS};

const TAGS: usize = BioTag::COUNT;
const O: usize = 0;
const I: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizationError {
    #[error("gold tag sequence violates BIO constraints: {0:?}")]
    InvalidGold(Vec<BioTag>),
    #[error("gold has {gold} tags but there are {positions} tagged positions")]
    LengthMismatch { gold: usize, positions: usize },
    #[error("nothing to tag")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// What type knowledge follows the filled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    VerbalizerOnly,
    VerbalizerPlusDefinition,
    #[default]
    VerbalizerPlusKeywords,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbalizer_only" => Ok(PromptMode::VerbalizerOnly),
            "verbalizer_plus_definition" => Ok(PromptMode::VerbalizerPlusDefinition),
            "verbalizer_plus_keywords" => Ok(PromptMode::VerbalizerPlusKeywords),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeAwarePrompt {
    pub content: PromptMode,
    /// Cloze prompt filled with the type's verbalizer.
    pub filled: String,
    /// Definition or keyword text; empty in verbalizer-only mode.
    pub knowledge: String,
    pub rendered: String,
}

impl TypeAwarePrompt {
    pub fn render(spec: &EventTypeSpec, prompt: &ClozePrompt, content: PromptMode, max_keywords: usize) -> Self {
        let filled = prompt.fill(spec.primary_verbalizer());
        let knowledge = match content {
            PromptMode::VerbalizerOnly => String::new(),
            PromptMode::VerbalizerPlusDefinition => spec.definition.clone().unwrap_or_default(),
            PromptMode::VerbalizerPlusKeywords => spec.capped_keywords(max_keywords).join(" "),
        };
        let rendered = if knowledge.is_empty() {
            filled.clone()
        } else {
            format!("{filled} {knowledge}")
        };
        TypeAwarePrompt {
            content,
            filled,
            knowledge,
            rendered,
        }
    }
}

/// Prompt settings shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerSettings {
    pub prompt: ClozePrompt,
    pub mode: PromptMode,
    pub max_keywords: usize,
}

impl Default for LocalizerSettings {
    fn default() -> Self {
        LocalizerSettings {
            prompt: ClozePrompt::default(),
            mode: PromptMode::default(),
            max_keywords: DEFAULT_MAX_KEYWORDS,
        }
    }
}

/// Context, filled prompt, then type knowledge. Only context words are
/// mapped to subtokens.
pub fn build_localization_input(
    sentence: &Sentence,
    spec: &EventTypeSpec,
    settings: &LocalizerSettings,
    encoder: &impl MaskedLanguageModel,
) -> Result<EncodedInput, EncoderError> {
    let rendered = TypeAwarePrompt::render(spec, &settings.prompt, settings.mode, settings.max_keywords);
    let mut segments = vec![(SegmentKind::FilledPrompt, prompt_words(&rendered.filled))];
    if !rendered.knowledge.is_empty() {
        segments.push((SegmentKind::TypeAware, prompt_words(&rendered.knowledge)));
    }
    EncodedInput::assemble(encoder.vocab(), &sentence.tokens, &segments, encoder.max_seq_len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrfOptions {
    /// Off gives the vanilla CRF: emissions are `W_l h_i` only.
    pub attention_enabled: bool,
    /// Forbid `O -> I` and a sequence-initial `I`.
    pub constrained: bool,
    /// Let prompt positions act as attention keys (never as tagged positions).
    pub prompt_keys: bool,
}

impl Default for CrfOptions {
    fn default() -> Self {
        CrfOptions {
            attention_enabled: true,
            constrained: true,
            prompt_keys: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `3 x m`
    pub w_l: Array2<f64>,
    /// `3 x m`
    pub w_v: Array2<f64>,
    /// `m x m`
    pub w_q: Array2<f64>,
    /// `m x m`
    pub w_k: Array2<f64>,
    /// `transitions[[from, to]]`
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
    pub options: CrfOptions,
}

impl CrfParams {
    pub fn zeros(dim: usize, options: CrfOptions) -> Self {
        CrfParams {
            w_l: Array2::zeros((TAGS, dim)),
            w_v: Array2::zeros((TAGS, dim)),
            w_q: Array2::zeros((dim, dim)),
            w_k: Array2::zeros((dim, dim)),
            transitions: Array2::zeros((TAGS, TAGS)),
            start: Array1::zeros(TAGS),
            end: Array1::zeros(TAGS),
            options,
        }
    }

    pub fn random(dim: usize, options: CrfOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / dim as f64).sqrt();
        let mut fill = |shape: (usize, usize), b: f64| Array2::from_shape_fn(shape, |_| rng.random_range(-b..b));
        CrfParams {
            w_l: fill((TAGS, dim), bound),
            w_v: fill((TAGS, dim), bound),
            w_q: fill((dim, dim), bound),
            w_k: fill((dim, dim), bound),
            transitions: Array2::zeros((TAGS, TAGS)),
            start: Array1::zeros(TAGS),
            end: Array1::zeros(TAGS),
            options,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_l.ncols()
    }

    /// Transition and boundary scores with structural masking applied.
    fn scores(&self) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let mut trans = self.transitions.clone();
        let mut start = self.start.clone();
        if self.options.constrained {
            trans[[O, I]] = f64::NEG_INFINITY;
            start[I] = f64::NEG_INFINITY;
        }
        (trans, start, self.end.clone())
    }
}

impl ParamSet for CrfParams {
    fn zeros_like(&self) -> Self {
        CrfParams::zeros(self.dim(), self.options)
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("crf.w_l", flat(&self.w_l));
        f("crf.w_v", flat(&self.w_v));
        f("crf.w_q", flat(&self.w_q));
        f("crf.w_k", flat(&self.w_k));
        f("crf.transitions", flat(&self.transitions));
        f("crf.start", flat(&self.start));
        f("crf.end", flat(&self.end));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("crf.w_l", flat_mut(&mut self.w_l));
        f("crf.w_v", flat_mut(&mut self.w_v));
        f("crf.w_q", flat_mut(&mut self.w_q));
        f("crf.w_k", flat_mut(&mut self.w_k));
        f("crf.transitions", flat_mut(&mut self.transitions));
        f("crf.start", flat_mut(&mut self.start));
        f("crf.end", flat_mut(&mut self.end));
    }

    fn visit_with(&mut self, g: &Self, f: &mut dyn FnMut(&str, &mut [f64], &[f64])) {
        f("crf.w_l", flat_mut(&mut self.w_l), flat(&g.w_l));
        f("crf.w_v", flat_mut(&mut self.w_v), flat(&g.w_v));
        f("crf.w_q", flat_mut(&mut self.w_q), flat(&g.w_q));
        f("crf.w_k", flat_mut(&mut self.w_k), flat(&g.w_k));
        f("crf.transitions", flat_mut(&mut self.transitions), flat(&g.transitions));
        f("crf.start", flat_mut(&mut self.start), flat(&g.start));
        f("crf.end", flat_mut(&mut self.end), flat(&g.end));
    }
}

/// Per-word tag scores, `n x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionTable {
    pub scores: Array2<f64>,
}

impl EmissionTable {
    pub fn new(scores: Array2<f64>) -> Self {
        assert_eq!(scores.ncols(), TAGS, "emission tables have one column per tag");
        EmissionTable { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }
}

fn row_softmax(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    a
}

/// Row-stochastic attention of `queries` (`n x m`) over `keys` (`k x m`).
pub fn attention_weights(queries: &Array2<f64>, keys: &Array2<f64>, params: &CrfParams) -> Array2<f64> {
    attention_parts(queries, keys, params).2
}

fn attention_parts(queries: &Array2<f64>, keys: &Array2<f64>, params: &CrfParams) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = (params.dim() as f64).sqrt();
    let q = queries.dot(&params.w_q.t());
    let k = keys.dot(&params.w_k.t());
    let alpha = row_softmax(q.dot(&k.t()) / scale);
    (q, k, alpha)
}

struct EmissionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    alpha: Array2<f64>,
    values: Array2<f64>,
}

fn emission_forward(queries: &Array2<f64>, keys: &Array2<f64>, params: &CrfParams) -> (Array2<f64>, Option<EmissionCache>) {
    let mut phi = queries.dot(&params.w_l.t());
    if !params.options.attention_enabled {
        return (phi, None);
    }
    let (q, k, alpha) = attention_parts(queries, keys, params);
    let values = keys.dot(&params.w_v.t());
    phi += &alpha.dot(&values);
    (phi, Some(EmissionCache { q, k, alpha, values }))
}

/// Accumulates parameter gradients and returns `(dL/dqueries, dL/dkeys)`.
fn emission_backward(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    params: &CrfParams,
    cache: Option<&EmissionCache>,
    d_phi: &Array2<f64>,
    grads: &mut CrfParams,
) -> (Array2<f64>, Array2<f64>) {
    grads.w_l += &d_phi.t().dot(queries);
    let mut d_queries = d_phi.dot(&params.w_l);
    let Some(c) = cache else {
        return (d_queries, Array2::zeros(keys.raw_dim()));
    };
    let scale = (params.dim() as f64).sqrt();

    let d_alpha = d_phi.dot(&c.values.t());
    let d_values = c.alpha.t().dot(d_phi);
    grads.w_v += &d_values.t().dot(keys);
    let mut d_keys = d_values.dot(&params.w_v);

    let mut d_logits = &c.alpha * &d_alpha;
    let row_dot = d_logits.sum_axis(Axis(1));
    for (mut row, (a_row, dot)) in d_logits.rows_mut().into_iter().zip(c.alpha.rows().into_iter().zip(row_dot.iter())) {
        row.scaled_add(-dot, &a_row);
    }
    d_logits /= scale;
    let d_q = d_logits.dot(&c.k);
    let d_k = d_logits.t().dot(&c.q);
    grads.w_q += &d_q.t().dot(queries);
    grads.w_k += &d_k.t().dot(keys);
    d_queries += &d_q.dot(&params.w_q);
    d_keys += &d_k.dot(&params.w_k);
    (d_queries, d_keys)
}

/// Emissions where the tagged rows also serve as the only keys.
pub fn emission_scores(hidden: &Array2<f64>, params: &CrfParams) -> EmissionTable {
    EmissionTable::new(emission_forward(hidden, hidden, params).0)
}

pub fn emission_scores_with_keys(queries: &Array2<f64>, keys: &Array2<f64>, params: &CrfParams) -> EmissionTable {
    EmissionTable::new(emission_forward(queries, keys, params).0)
}

fn lse(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn forward_table(e: &Array2<f64>, trans: &Array2<f64>, start: &Array1<f64>) -> Array2<f64> {
    let n = e.nrows();
    let mut alpha = Array2::zeros((n, TAGS));
    for y in 0..TAGS {
        alpha[[0, y]] = start[y] + e[[0, y]];
    }
    for i in 1..n {
        for y in 0..TAGS {
            alpha[[i, y]] = lse((0..TAGS).map(|x| alpha[[i - 1, x]] + trans[[x, y]])) + e[[i, y]];
        }
    }
    alpha
}

/// `log Z` by the forward algorithm.
pub fn log_partition(emissions: &EmissionTable, params: &CrfParams) -> f64 {
    let (trans, start, end) = params.scores();
    let alpha = forward_table(&emissions.scores, &trans, &start);
    let last = emissions.len() - 1;
    lse((0..TAGS).map(|y| alpha[[last, y]] + end[y]))
}

/// Unnormalized log score of one tag sequence (`-inf` if forbidden).
pub fn sequence_score(emissions: &EmissionTable, params: &CrfParams, tags: &[BioTag]) -> f64 {
    let (trans, start, end) = params.scores();
    let e = &emissions.scores;
    let mut score = start[tags[0].index()] + end[tags[tags.len() - 1].index()];
    for (i, t) in tags.iter().enumerate() {
        score += e[[i, t.index()]];
        if i > 0 {
            score += trans[[tags[i - 1].index(), t.index()]];
        }
    }
    score
}

fn check_gold(emissions: &EmissionTable, params: &CrfParams, gold: &[BioTag]) -> Result<(), LocalizationError> {
    if emissions.is_empty() {
        return Err(LocalizationError::Empty);
    }
    if gold.len() != emissions.len() {
        return Err(LocalizationError::LengthMismatch {
            gold: gold.len(),
            positions: emissions.len(),
        });
    }
    if params.options.constrained && !is_well_formed(gold) {
        return Err(LocalizationError::InvalidGold(gold.to_vec()));
    }
    Ok(())
}

/// Negative log-likelihood `-log p(gold | h)`.
pub fn crf_log_likelihood(emissions: &EmissionTable, params: &CrfParams, gold: &[BioTag]) -> Result<f64, LocalizationError> {
    check_gold(emissions, params, gold)?;
    Ok(log_partition(emissions, params) - sequence_score(emissions, params, gold))
}

/// NLL with gradients w.r.t. the emissions and the transition/boundary
/// parameters (accumulated into `grads`), via forward-backward marginals.
pub fn crf_nll_and_grad(
    emissions: &EmissionTable,
    params: &CrfParams,
    gold: &[BioTag],
    grads: &mut CrfParams,
) -> Result<(f64, Array2<f64>), LocalizationError> {
    check_gold(emissions, params, gold)?;
    let (trans, start, end) = params.scores();
    let e = &emissions.scores;
    let n = e.nrows();
    let alpha = forward_table(e, &trans, &start);
    let log_z = lse((0..TAGS).map(|y| alpha[[n - 1, y]] + end[y]));

    let mut beta = Array2::zeros((n, TAGS));
    for y in 0..TAGS {
        beta[[n - 1, y]] = end[y];
    }
    for i in (0..n - 1).rev() {
        for x in 0..TAGS {
            beta[[i, x]] = lse((0..TAGS).map(|y| trans[[x, y]] + e[[i + 1, y]] + beta[[i + 1, y]]));
        }
    }

    let mut d_e = Array2::zeros((n, TAGS));
    for i in 0..n {
        for y in 0..TAGS {
            d_e[[i, y]] = (alpha[[i, y]] + beta[[i, y]] - log_z).exp();
        }
        d_e[[i, gold[i].index()]] -= 1.0;
    }
    for y in 0..TAGS {
        grads.start[y] += (alpha[[0, y]] + beta[[0, y]] - log_z).exp();
        grads.end[y] += (alpha[[n - 1, y]] + beta[[n - 1, y]] - log_z).exp();
    }
    grads.start[gold[0].index()] -= 1.0;
    grads.end[gold[n - 1].index()] -= 1.0;
    for i in 1..n {
        for x in 0..TAGS {
            for y in 0..TAGS {
                let p = (alpha[[i - 1, x]] + trans[[x, y]] + e[[i, y]] + beta[[i, y]] - log_z).exp();
                grads.transitions[[x, y]] += p;
            }
        }
        grads.transitions[[gold[i - 1].index(), gold[i].index()]] -= 1.0;
    }
    let nll = log_z - sequence_score(emissions, params, gold);
    Ok((nll, d_e))
}

/// MAP tag sequence. Ties prefer `O`, then `B`, then `I`.
pub fn viterbi_decode(emissions: &EmissionTable, params: &CrfParams) -> Vec<BioTag> {
    let n = emissions.len();
    if n == 0 {
        return Vec::new();
    }
    let (trans, start, end) = params.scores();
    let e = &emissions.scores;
    let mut delta = Array2::zeros((n, TAGS));
    let mut back = vec![[0usize; TAGS]; n];
    for y in 0..TAGS {
        delta[[0, y]] = start[y] + e[[0, y]];
    }
    for i in 1..n {
        for y in 0..TAGS {
            let mut best = 0;
            let mut best_score = delta[[i - 1, 0]] + trans[[0, y]];
            for x in 1..TAGS {
                let s = delta[[i - 1, x]] + trans[[x, y]];
                if s > best_score {
                    best = x;
                    best_score = s;
                }
            }
            delta[[i, y]] = best_score + e[[i, y]];
            back[i][y] = best;
        }
    }
    let mut last = 0;
    let mut last_score = delta[[n - 1, 0]] + end[0];
    for y in 1..TAGS {
        let s = delta[[n - 1, y]] + end[y];
        if s > last_score {
            last = y;
            last_score = s;
        }
    }
    let mut tags = vec![BioTag::O; n];
    let mut cur = last;
    for i in (0..n).rev() {
        tags[i] = BioTag::from_index(cur).expect("tag index");
        cur = back[i][cur];
    }
    tags
}

/// Tagged (first-subtoken) rows and attention key rows of an encoded input.
pub fn tagged_and_key_positions(input: &EncodedInput, options: &CrfOptions) -> (Vec<usize>, Vec<usize>) {
    let tagged = input.word_to_subtoken.clone();
    let keys = if options.prompt_keys {
        (0..input.len()).collect()
    } else {
        tagged.clone()
    };
    (tagged, keys)
}

/// CRF NLL from the encoder's hidden states, with gradients for the CRF
/// parameters (accumulated) and for every hidden row (returned).
pub fn localization_loss_and_grad(
    hidden: &Array2<f64>,
    tagged: &[usize],
    keys: &[usize],
    params: &CrfParams,
    gold: &[BioTag],
    grads: &mut CrfParams,
) -> Result<(f64, Array2<f64>), LocalizationError> {
    if tagged.is_empty() {
        return Err(LocalizationError::Empty);
    }
    let queries = hidden.select(Axis(0), tagged);
    let key_rows = hidden.select(Axis(0), keys);
    let (phi, cache) = emission_forward(&queries, &key_rows, params);
    let emissions = EmissionTable::new(phi);
    let (nll, d_phi) = crf_nll_and_grad(&emissions, params, gold, grads)?;
    let (d_q, d_k) = emission_backward(&queries, &key_rows, params, cache.as_ref(), &d_phi, grads);
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    for (row, &pos) in tagged.iter().enumerate() {
        d_hidden.row_mut(pos).scaled_add(1.0, &d_q.row(row));
    }
    for (row, &pos) in keys.iter().enumerate() {
        d_hidden.row_mut(pos).scaled_add(1.0, &d_k.row(row));
    }
    Ok((nll, d_hidden))
}

/// Tags of every context word for one `(sentence, type)` pair. Words lost to
/// truncation are tagged `O`.
pub fn tag_sentence(
    sentence: &Sentence,
    spec: &EventTypeSpec,
    encoder: &impl MaskedLanguageModel,
    params: &CrfParams,
    settings: &LocalizerSettings,
) -> Result<Vec<BioTag>, LocalizationError> {
    let input = build_localization_input(sentence, spec, settings, encoder)?;
    let output = encoder.encode(&input)?;
    let (tagged, keys) = tagged_and_key_positions(&input, &params.options);
    let mut tags = vec![BioTag::O; sentence.len()];
    if tagged.is_empty() {
        return Ok(tags);
    }
    let queries = output.hidden.select(Axis(0), &tagged);
    let key_rows = output.hidden.select(Axis(0), &keys);
    let emissions = emission_scores_with_keys(&queries, &key_rows, params);
    for (slot, tag) in tags.iter_mut().zip(viterbi_decode(&emissions, params)) {
        *slot = tag;
    }
    Ok(tags)
}

/// Finds the trigger spans of one event type in a sentence.
pub fn localize(
    sentence: &Sentence,
    spec: &EventTypeSpec,
    encoder: &impl MaskedLanguageModel,
    params: &CrfParams,
    settings: &LocalizerSettings,
) -> Result<Vec<EventMention>, LocalizationError> {
    let tags = tag_sentence(sentence, spec, encoder, params, settings)?;
    Ok(bio_to_spans(&tags)
        .into_iter()
        .map(|(start, end)| EventMention::new(spec.name.clone(), start, end))
        .collect())
}
