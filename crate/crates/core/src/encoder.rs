//! Masked-language-model backbone contract and the bundled toy encoder.
//!
//! Both pipeline stages run on the same backbone. Inputs are assembled from a
//! context segment followed by one or more prompt segments; only the context
//! is ever truncated.

use indexmap::IndexSet;
use log::warn;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{flat, flat_mut, ParamSet};

pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Default maximum input length in subtokens.
pub const DEFAULT_MAX_SEQ_LEN: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("prompt segments need {needed} subtokens but the limit is {max}")]
    PromptTooLong { needed: usize, max: usize },
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("add_token needs at least one constituent")]
    EmptyComposite,
    #[error("input has no subtokens")]
    EmptyInput,
    #[error("malformed input: {0}")]
    Malformed(String),
}

/// Closed, ordered token inventory. Ids are insertion positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: IndexSet<String>,
}

impl Vocabulary {
    /// Builds a lowercased vocabulary; `[UNK]` and `[MASK]` always take ids 0 and 1.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = IndexSet::new();
        tokens.insert(UNK_TOKEN.to_owned());
        tokens.insert(MASK_TOKEN.to_owned());
        for w in words {
            let w = normalize(w.as_ref());
            if !w.is_empty() {
                tokens.insert(w);
            }
        }
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.get_index_of(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get_index(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        1
    }

    fn push(&mut self, token: String) -> usize {
        self.tokens.insert_full(token).0
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    /// Splits one word into subtoken ids: whole-word hit first, then greedy
    /// longest-match word pieces (`##` continuations), else `[UNK]`.
    pub fn tokenize_word(&self, word: &str) -> Vec<usize> {
        if word == MASK_TOKEN {
            return vec![self.mask_id()];
        }
        let word = normalize(word);
        if let Some(id) = self.id(&word) {
            return vec![id];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let piece = if start > 0 { format!("##{piece}") } else { piece };
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk_id()],
            }
        }
        pieces
    }
}

fn normalize(word: &str) -> String {
    if word == MASK_TOKEN || word == UNK_TOKEN {
        word.to_owned()
    } else {
        word.to_lowercase()
    }
}

/// Splits prompt text into words: whitespace, then trailing sentence
/// punctuation peeled into separate words.
pub fn prompt_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let trimmed = chunk.trim_end_matches(['.', ',', ';', ':', '!', '?']);
        if !trimmed.is_empty() {
            words.push(trimmed.to_owned());
        }
        for c in chunk[trimmed.len()..].chars() {
            words.push(c.to_string());
        }
    }
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Context,
    /// The identification cloze prompt (holds the mask).
    Cloze,
    /// The cloze prompt filled with a type's verbalizer.
    FilledPrompt,
    /// Definition or keywords of one event type.
    TypeAware,
}

/// Half-open subtoken range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub subtoken_ids: Vec<usize>,
    /// First-subtoken position of each retained context word.
    pub word_to_subtoken: Vec<usize>,
    pub mask_position: Option<usize>,
    pub segments: Vec<Segment>,
}

impl EncodedInput {
    /// Tokenizes `context` followed by `prompts` and fits the result into
    /// `max_len` subtokens by dropping trailing context words.
    pub fn assemble(
        vocab: &Vocabulary,
        context: &[String],
        prompts: &[(SegmentKind, Vec<String>)],
        max_len: usize,
    ) -> Result<Self, EncoderError> {
        let mut ids = Vec::new();
        let mut word_to_subtoken = Vec::with_capacity(context.len());
        for word in context {
            word_to_subtoken.push(ids.len());
            ids.extend(vocab.tokenize_word(word));
        }
        let mut segments = vec![Segment {
            kind: SegmentKind::Context,
            start: 0,
            end: ids.len(),
        }];
        let mut mask_position = None;
        for (kind, words) in prompts {
            let start = ids.len();
            for word in words {
                let pieces = vocab.tokenize_word(word);
                if word == MASK_TOKEN && mask_position.is_none() {
                    mask_position = Some(ids.len());
                }
                ids.extend(pieces);
            }
            if ids.len() > start {
                segments.push(Segment {
                    kind: *kind,
                    start,
                    end: ids.len(),
                });
            }
        }
        EncodedInput {
            subtoken_ids: ids,
            word_to_subtoken,
            mask_position,
            segments,
        }
        .fit(max_len)
    }

    pub fn len(&self) -> usize {
        self.subtoken_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtoken_ids.is_empty()
    }

    pub fn context(&self) -> &Segment {
        &self.segments[0]
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    /// Drops whole context words from the end until the input fits.
    pub fn fit(mut self, max_len: usize) -> Result<Self, EncoderError> {
        if self.len() <= max_len {
            return Ok(self);
        }
        let context_len = self.context().len();
        let prompt_len = self.len() - context_len;
        if prompt_len > max_len {
            return Err(EncoderError::PromptTooLong {
                needed: prompt_len,
                max: max_len,
            });
        }
        let budget = max_len - prompt_len;
        let mut keep_words = self.word_to_subtoken.len();
        let mut keep_subtokens = context_len;
        while keep_subtokens > budget {
            keep_words -= 1;
            keep_subtokens = self.word_to_subtoken[keep_words];
        }
        warn!(
            "input of {} subtokens exceeds {max_len}; keeping {keep_words} of {} context words",
            self.len(),
            self.word_to_subtoken.len()
        );
        let removed = context_len - keep_subtokens;
        self.subtoken_ids.drain(keep_subtokens..context_len);
        self.word_to_subtoken.truncate(keep_words);
        self.segments[0].end = keep_subtokens;
        for seg in &mut self.segments[1..] {
            seg.start -= removed;
            seg.end -= removed;
        }
        if let Some(p) = self.mask_position.as_mut() {
            *p -= removed;
        }
        Ok(self)
    }

    fn validate(&self, vocab_len: usize) -> Result<(), EncoderError> {
        if self.subtoken_ids.is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        if let Some(&bad) = self.subtoken_ids.iter().find(|&&id| id >= vocab_len) {
            return Err(EncoderError::Malformed(format!("subtoken id {bad} outside vocabulary")));
        }
        if self.mask_position.is_some_and(|p| p >= self.len()) {
            return Err(EncoderError::Malformed("mask position outside input".into()));
        }
        if self.word_to_subtoken.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EncoderError::Malformed("word map is not increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// One `m`-dimensional row per subtoken.
    pub hidden: Array2<f64>,
    pub vocab_logits_at_mask: Option<Array1<f64>>,
}

/// Read-only contract every backbone satisfies.
pub trait MaskedLanguageModel {
    fn vocab(&self) -> &Vocabulary;

    /// Hidden dimension `m`.
    fn dim(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    fn encode(&self, input: &EncodedInput) -> Result<EncoderOutput, EncoderError>;

    /// Appends a token whose input and output embeddings are the mean of
    /// `init_from`. An existing surface returns its current id.
    fn add_token(&mut self, surface: &str, init_from: &[&str]) -> Result<usize, EncoderError>;
}

/// Backbones that can be fine-tuned.
pub trait TrainableEncoder: MaskedLanguageModel {
    type Weights: ParamSet + Clone;
    type Tape;

    fn weights(&self) -> &Self::Weights;

    fn weights_mut(&mut self) -> &mut Self::Weights;

    fn forward(&self, input: &EncodedInput) -> Result<(EncoderOutput, Self::Tape), EncoderError>;

    /// Accumulates parameter gradients given upstream gradients of the
    /// hidden states and of selected mask logits `(vocab id, dL/dlogit)`.
    fn backward(
        &self,
        tape: &Self::Tape,
        d_hidden: Option<&Array2<f64>>,
        d_mask_logits: &[(usize, f64)],
        grads: &mut Self::Weights,
    );
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub embed_dim: usize,
    pub dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            embed_dim: 32,
            dim: 32,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

/// Trainable part of the toy encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWeights {
    /// `m x d` token projection.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `m x 3m` mixing layer over `[token ; context mean ; prompt mean]`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `V x m` output embeddings.
    pub lm_head: Array2<f64>,
    pub lm_bias: Array1<f64>,
}

impl ParamSet for ToyWeights {
    fn zeros_like(&self) -> Self {
        ToyWeights {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            lm_head: Array2::zeros(self.lm_head.raw_dim()),
            lm_bias: Array1::zeros(self.lm_bias.raw_dim()),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("encoder.w1", flat(&self.w1));
        f("encoder.b1", flat(&self.b1));
        f("encoder.w2", flat(&self.w2));
        f("encoder.b2", flat(&self.b2));
        f("encoder.lm_head", flat(&self.lm_head));
        f("encoder.lm_bias", flat(&self.lm_bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("encoder.w1", flat_mut(&mut self.w1));
        f("encoder.b1", flat_mut(&mut self.b1));
        f("encoder.w2", flat_mut(&mut self.w2));
        f("encoder.b2", flat_mut(&mut self.b2));
        f("encoder.lm_head", flat_mut(&mut self.lm_head));
        f("encoder.lm_bias", flat_mut(&mut self.lm_bias));
    }

    fn visit_with(&mut self, g: &Self, f: &mut dyn FnMut(&str, &mut [f64], &[f64])) {
        f("encoder.w1", flat_mut(&mut self.w1), flat(&g.w1));
        f("encoder.b1", flat_mut(&mut self.b1), flat(&g.b1));
        f("encoder.w2", flat_mut(&mut self.w2), flat(&g.w2));
        f("encoder.b2", flat_mut(&mut self.b2), flat(&g.b2));
        f("encoder.lm_head", flat_mut(&mut self.lm_head), flat(&g.lm_head));
        f("encoder.lm_bias", flat_mut(&mut self.lm_bias), flat(&g.lm_bias));
    }
}

/// Hermetic stand-in for a pretrained masked LM.
///
/// Subtoken embeddings are fixed vectors derived from a hash of the token
/// surface and the encoder seed. Two trainable tanh layers follow; the second
/// mixes each position with the mean of the context segment and the mean of
/// the prompt segments, so the mask position sees the whole sentence. The LM
/// head starts tied to the input embeddings and is trained separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    vocab: Vocabulary,
    embeddings: Array2<f64>,
    weights: ToyWeights,
}

pub struct ToyTape {
    input: EncodedInput,
    x: Array2<f64>,
    u: Array2<f64>,
    mixed: Array2<f64>,
    h: Array2<f64>,
    context_rows: usize,
    prompt_rows: usize,
}

fn hashed_embedding(seed: u64, token: &str, dim: usize) -> Array1<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(key);
    Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ToyEncoder {
    pub fn new(vocab: Vocabulary, config: ToyEncoderConfig) -> Self {
        let (d, m) = (config.embed_dim, config.dim);
        let mut embeddings = Array2::zeros((vocab.len(), d));
        for (i, token) in vocab.iter().enumerate() {
            embeddings.row_mut(i).assign(&hashed_embedding(config.seed, token, d));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_e4c0de);
        let lm_head = if d == m {
            embeddings.clone()
        } else {
            uniform(&mut rng, vocab.len(), m, 1.0)
        };
        let weights = ToyWeights {
            w1: uniform(&mut rng, m, d, (1.0 / d as f64).sqrt()),
            b1: Array1::zeros(m),
            w2: uniform(&mut rng, m, 3 * m, (1.0 / (3 * m) as f64).sqrt()),
            b2: Array1::zeros(m),
            lm_bias: Array1::zeros(vocab.len()),
            lm_head,
        };
        ToyEncoder {
            config,
            vocab,
            embeddings,
            weights,
        }
    }

    pub fn input_embedding(&self, token: &str) -> Option<Array1<f64>> {
        self.vocab.id(token).map(|i| self.embeddings.row(i).to_owned())
    }

    pub fn output_embedding(&self, token: &str) -> Option<Array1<f64>> {
        self.vocab.id(token).map(|i| self.weights.lm_head.row(i).to_owned())
    }

    fn run(&self, input: &EncodedInput) -> Result<(EncoderOutput, ToyTape), EncoderError> {
        let input = input.clone().fit(self.config.max_seq_len)?;
        input.validate(self.vocab.len())?;
        let w = &self.weights;
        let m = self.config.dim;
        let p = input.len();

        let x = self.embeddings.select(Axis(0), &input.subtoken_ids);
        let mut u = x.dot(&w.w1.t());
        u += &w.b1;
        u.mapv_inplace(f64::tanh);

        let ctx = input.context();
        let context_rows = ctx.len();
        let prompt_rows = p - context_rows;
        let ctx_mean = mean_rows(&u, ctx.start..ctx.end);
        let prompt_mean = mean_rows(&u, ctx.end..p);

        let mut mixed = Array2::zeros((p, 3 * m));
        mixed.slice_mut(s![.., ..m]).assign(&u);
        mixed.slice_mut(s![.., m..2 * m]).assign(&ctx_mean);
        mixed.slice_mut(s![.., 2 * m..]).assign(&prompt_mean);
        let mut h = mixed.dot(&w.w2.t());
        h += &w.b2;
        h.mapv_inplace(f64::tanh);

        let vocab_logits_at_mask = input.mask_position.map(|pos| {
            let mut logits = w.lm_head.dot(&h.row(pos));
            logits += &w.lm_bias;
            logits
        });
        let output = EncoderOutput {
            hidden: h.clone(),
            vocab_logits_at_mask,
        };
        let tape = ToyTape {
            input,
            x,
            u,
            mixed,
            h,
            context_rows,
            prompt_rows,
        };
        Ok((output, tape))
    }
}

fn mean_rows(a: &Array2<f64>, rows: std::ops::Range<usize>) -> Array1<f64> {
    if rows.is_empty() {
        Array1::zeros(a.ncols())
    } else {
        a.slice(s![rows, ..]).mean_axis(Axis(0)).expect("non-empty range")
    }
}

impl MaskedLanguageModel for ToyEncoder {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn encode(&self, input: &EncodedInput) -> Result<EncoderOutput, EncoderError> {
        self.run(input).map(|(out, _)| out)
    }

    fn add_token(&mut self, surface: &str, init_from: &[&str]) -> Result<usize, EncoderError> {
        let surface = normalize(surface);
        if let Some(id) = self.vocab.id(&surface) {
            return Ok(id);
        }
        if init_from.is_empty() {
            return Err(EncoderError::EmptyComposite);
        }
        let ids = init_from
            .iter()
            .map(|t| {
                let t = normalize(t);
                self.vocab.id(&t).ok_or(EncoderError::UnknownToken(t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let input_row = self.embeddings.select(Axis(0), &ids).mean_axis(Axis(0)).expect("non-empty");
        let output_row = self.weights.lm_head.select(Axis(0), &ids).mean_axis(Axis(0)).expect("non-empty");
        let bias = ids.iter().map(|&i| self.weights.lm_bias[i]).sum::<f64>() / ids.len() as f64;

        let id = self.vocab.push(surface);
        self.embeddings.push_row(input_row.view()).expect("row width matches");
        self.weights.lm_head.push_row(output_row.view()).expect("row width matches");
        let mut lm_bias = self.weights.lm_bias.to_vec();
        lm_bias.push(bias);
        self.weights.lm_bias = Array1::from(lm_bias);
        Ok(id)
    }
}

impl TrainableEncoder for ToyEncoder {
    type Weights = ToyWeights;
    type Tape = ToyTape;

    fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    fn weights_mut(&mut self) -> &mut ToyWeights {
        &mut self.weights
    }

    fn forward(&self, input: &EncodedInput) -> Result<(EncoderOutput, ToyTape), EncoderError> {
        self.run(input)
    }

    fn backward(&self, tape: &ToyTape, d_hidden: Option<&Array2<f64>>, d_mask_logits: &[(usize, f64)], grads: &mut ToyWeights) {
        let w = &self.weights;
        let m = self.config.dim;
        let p = tape.h.nrows();
        let mut dh = match d_hidden {
            Some(d) => d.clone(),
            None => Array2::zeros((p, m)),
        };
        if let Some(pos) = tape.input.mask_position {
            let h_mask = tape.h.row(pos);
            for &(id, g) in d_mask_logits {
                grads.lm_bias[id] += g;
                grads.lm_head.row_mut(id).scaled_add(g, &h_mask);
                dh.row_mut(pos).scaled_add(g, &w.lm_head.row(id));
            }
        }

        let mut da2 = dh;
        da2.zip_mut_with(&tape.h, |g, &h| *g *= 1.0 - h * h);
        grads.w2 += &da2.t().dot(&tape.mixed);
        grads.b2 += &da2.sum_axis(Axis(0));
        let d_mixed = da2.dot(&w.w2);

        let mut du = d_mixed.slice(s![.., ..m]).to_owned();
        let ctx_end = tape.context_rows;
        if tape.context_rows > 0 {
            let d_ctx = d_mixed.slice(s![.., m..2 * m]).sum_axis(Axis(0)) / tape.context_rows as f64;
            du.slice_mut(s![..ctx_end, ..]).zip_mut_with(&d_ctx.broadcast((ctx_end, m)).unwrap(), |a, b| *a += b);
        }
        if tape.prompt_rows > 0 {
            let d_prm = d_mixed.slice(s![.., 2 * m..]).sum_axis(Axis(0)) / tape.prompt_rows as f64;
            du.slice_mut(s![ctx_end.., ..])
                .zip_mut_with(&d_prm.broadcast((p - ctx_end, m)).unwrap(), |a, b| *a += b);
        }

        let mut da1 = du;
        da1.zip_mut_with(&tape.u, |g, &u| *g *= 1.0 - u * u);
        grads.w1 += &da1.t().dot(&tape.x);
        grads.b1 += &da1.sum_axis(Axis(0));
    }
}
