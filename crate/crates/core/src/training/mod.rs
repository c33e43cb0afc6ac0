//! Joint training of both stages over one shared encoder, prediction, and
//! checkpointing.
//!
//! Identification and localization batches alternate; each step updates the
//! encoder together with the head of the task it came from.

mod batches;
mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeSet;
use std::fmt;

use log::{debug, info};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{make_task_batches, negative_pairs, positive_pairs, LocalizationPair, TaskBatch};
pub use checkpoint::CheckpointError;
pub use config::{ConfigError, RunConfig, Schedule};
pub use optim::{add_assign, clip_global_norm, scheduled_lr, AdamW, ClipTarget};

use crate::encoder::{prompt_words, EncoderError, MaskedLanguageModel, ToyEncoder, ToyEncoderConfig, TrainableEncoder, Vocabulary};
use crate::evaluation::{score_mentions, ScoreReport};
use crate::identification::{
    build_cloze_input, decode_identification, identification_loss_and_grad, score_event_types, AggregationWeights,
    IdentificationError, IdentificationHead,
};
use crate::localization::{
    build_localization_input, localization_loss_and_grad, localize, tagged_and_key_positions, CrfParams,
    LocalizationError,
};
use crate::params::ParamSet;
use crate::types::{AnnotatedSentence, EventMention, Ontology, Sentence, TypeScores, ValidationError};
use crate::verbalizer::{apply_selection, select_verbalizers, VerbalizerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchId {
    pub epoch: usize,
    pub index: usize,
}

impl fmt::Display for BatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} batch {}", self.epoch, self.index)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at {batch}: non-finite loss or gradient ({loss})")]
    Divergence { batch: BatchId, loss: f64 },
    #[error("training split is empty")]
    EmptySplit,
    #[error(transparent)]
    Identification(#[from] IdentificationError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Verbalizer(#[from] VerbalizerError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Encoder, identification head and CRF, plus the config and ontology they
/// were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<E = ToyEncoder> {
    pub config: RunConfig,
    pub ontology: Ontology,
    pub encoder: E,
    pub head: IdentificationHead,
    pub crf: CrfParams,
}

/// Words the toy encoder needs: sentence tokens, prompt words, verbalizer
/// parts, type knowledge and the NULL verbalizer.
pub fn toy_vocabulary<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    ontology: &Ontology,
    config: &RunConfig,
) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for s in sentences {
        words.extend(s.tokens.iter().cloned());
    }
    words.extend(config.prompt.words());
    words.push(ontology.null_verbalizer.clone());
    for spec in &ontology.types {
        for v in &spec.verbalizers {
            words.extend(v.split(['_', '-', ' ']).map(str::to_owned));
        }
        for k in &spec.keywords {
            words.extend(prompt_words(k));
        }
        if let Some(d) = &spec.definition {
            words.extend(prompt_words(d));
        }
    }
    Vocabulary::build(words)
}

impl Model<ToyEncoder> {
    /// Builds a fresh toy model for `train`, selecting verbalizers first if
    /// the config asks for it.
    pub fn build_toy(config: RunConfig, ontology: Ontology, train: &[AnnotatedSentence]) -> Result<Self, TrainError> {
        config.validate()?;
        let vocab = toy_vocabulary(train.iter().map(|s| &s.sentence), &ontology, &config);
        let mut encoder = ToyEncoder::new(
            vocab,
            ToyEncoderConfig {
                embed_dim: config.dim,
                dim: config.dim,
                max_seq_len: config.max_seq_len,
                seed: config.seed,
            },
        );
        let ontology = if config.auto_verbalizers {
            let selection = select_verbalizers(train, &ontology, &mut encoder, &config.prompt, config.verbalizers_per_type)?;
            info!("selected verbalizers: {selection:?}");
            apply_selection(&ontology, &selection)
        } else {
            ontology
        };
        Model::new(config, ontology, encoder)
    }
}

impl<E: MaskedLanguageModel> Model<E> {
    pub fn new(config: RunConfig, ontology: Ontology, mut encoder: E) -> Result<Self, TrainError> {
        config.validate()?;
        let head = IdentificationHead::new(&ontology, &mut encoder, config.aggregation)?;
        let crf = CrfParams::random(encoder.dim(), config.crf_options(), config.seed.wrapping_add(1));
        Ok(Model {
            config,
            ontology,
            encoder,
            head,
            crf,
        })
    }

    pub fn score_types(&self, sentence: &Sentence) -> Result<TypeScores, TrainError> {
        let input = build_cloze_input(sentence, &self.config.prompt, &self.encoder)?;
        let output = self.encoder.encode(&input)?;
        Ok(score_event_types(&output, &self.head)?)
    }

    pub fn identify(&self, sentence: &Sentence) -> Result<BTreeSet<String>, TrainError> {
        Ok(decode_identification(&self.score_types(sentence)?))
    }

    pub fn localize(&self, sentence: &Sentence, event_type: &str) -> Result<Vec<EventMention>, TrainError> {
        let spec = self
            .ontology
            .get(event_type)
            .ok_or_else(|| IdentificationError::UnknownLabel(event_type.to_owned()))?;
        Ok(localize(sentence, spec, &self.encoder, &self.crf, &self.config.localizer_settings())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Identify types, then localize each predicted type.
    #[default]
    TwoStage,
    /// Skip identification and localize every ontology type.
    Enumerate,
}

impl std::str::FromStr for PredictMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_stage" | "two-stage" => Ok(PredictMode::TwoStage),
            "enumerate" => Ok(PredictMode::Enumerate),
            other => Err(format!("unknown prediction mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub sentences: Vec<AnnotatedSentence>,
    /// Stage-1 type sets (types with a nonempty localization in enumerate
    /// mode), aligned with `sentences`.
    pub types: Vec<BTreeSet<String>>,
    pub localizer_calls: usize,
}

impl Predictions {
    pub fn type_sets(&self) -> Vec<(String, BTreeSet<String>)> {
        self.sentences
            .iter()
            .zip(&self.types)
            .map(|(s, t)| (s.id().to_owned(), t.clone()))
            .collect()
    }
}

/// Runs the pipeline over `sentences` in parallel against a read-only
/// model; output order follows input order.
pub fn predict<E: MaskedLanguageModel + Sync>(
    model: &Model<E>,
    sentences: &[Sentence],
    mode: PredictMode,
) -> Result<Predictions, TrainError> {
    let per_sentence = sentences
        .par_iter()
        .map(|s| -> Result<_, TrainError> {
            let candidates: Vec<String> = match mode {
                PredictMode::TwoStage => model.identify(s)?.into_iter().collect(),
                PredictMode::Enumerate => model.ontology.names().map(str::to_owned).collect(),
            };
            let mut mentions = Vec::new();
            let mut found = BTreeSet::new();
            for t in &candidates {
                let m = model.localize(s, t)?;
                if !m.is_empty() {
                    found.insert(t.clone());
                }
                mentions.extend(m);
            }
            let types = match mode {
                PredictMode::TwoStage => candidates.iter().cloned().collect(),
                PredictMode::Enumerate => found,
            };
            Ok((AnnotatedSentence::new(s.clone(), mentions)?, types, candidates.len()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Predictions {
        sentences: Vec::with_capacity(per_sentence.len()),
        types: Vec::with_capacity(per_sentence.len()),
        localizer_calls: 0,
    };
    for (s, t, calls) in per_sentence {
        out.sentences.push(s);
        out.types.push(t);
        out.localizer_calls += calls;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub identification_loss: Option<f64>,
    pub localization_loss: Option<f64>,
    pub dev: Option<ScoreReport>,
}

impl EpochRecord {
    pub fn total_loss(&self) -> f64 {
        self.identification_loss.unwrap_or(0.0) + self.localization_loss.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept when a dev split was given.
    pub best_epoch: Option<usize>,
}

struct Grads<W> {
    encoder: W,
    wavg: AggregationWeights,
    crf: CrfParams,
}

impl<W: ParamSet> Grads<W> {
    fn zeros<E: TrainableEncoder<Weights = W>>(model: &Model<E>) -> Self {
        Grads {
            encoder: model.encoder.weights().zeros_like(),
            wavg: model.head.weights.zeros_like(),
            crf: model.crf.zeros_like(),
        }
    }

    fn add(&mut self, other: &Self) {
        add_assign(&mut self.encoder, &other.encoder);
        add_assign(&mut self.wavg, &other.wavg);
        add_assign(&mut self.crf, &other.crf);
    }

    fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        self.wavg.scale(factor);
        self.crf.scale(factor);
    }

    fn all_finite(&self) -> bool {
        self.encoder.all_finite() && self.wavg.all_finite() && self.crf.all_finite()
    }
}

fn identification_item<E: TrainableEncoder>(
    model: &Model<E>,
    sentence: &AnnotatedSentence,
) -> Result<(f64, Grads<E::Weights>), TrainError> {
    let mut grads = Grads::zeros(model);
    let input = build_cloze_input(&sentence.sentence, &model.config.prompt, &model.encoder)?;
    let (output, tape) = model.encoder.forward(&input)?;
    let scores = score_event_types(&output, &model.head)?;
    let (loss, d_scores) = identification_loss_and_grad(&scores, &sentence.event_types(), &model.config.loss_config());
    let logits = output.vocab_logits_at_mask.as_ref().ok_or(IdentificationError::NoMaskLogits)?;
    let d_logits = model.head.backward(logits, &d_scores, &mut grads.wavg);
    model.encoder.backward(&tape, None, &d_logits, &mut grads.encoder);
    Ok((loss, grads))
}

fn localization_item<E: TrainableEncoder>(
    model: &Model<E>,
    sentence: &AnnotatedSentence,
    pair: &LocalizationPair,
) -> Result<(f64, Grads<E::Weights>), TrainError> {
    let mut grads = Grads::zeros(model);
    let spec = model
        .ontology
        .get(&pair.event_type)
        .ok_or_else(|| IdentificationError::UnknownLabel(pair.event_type.clone()))?;
    let input = build_localization_input(&sentence.sentence, spec, &model.config.localizer_settings(), &model.encoder)?;
    let (output, tape) = model.encoder.forward(&input)?;
    let (tagged, keys) = tagged_and_key_positions(&input, &model.crf.options);
    // truncation keeps a prefix of the context words
    let gold = &pair.tags[..tagged.len()];
    let (loss, d_hidden) = localization_loss_and_grad(&output.hidden, &tagged, &keys, &model.crf, gold, &mut grads.crf)?;
    debug_assert_eq!(d_hidden.len_of(Axis(0)), input.len());
    model.encoder.backward(&tape, Some(&d_hidden), &[], &mut grads.encoder);
    Ok((loss, grads))
}

type Snapshot<W> = (W, AggregationWeights, CrfParams);

/// Fine-tunes `model` on `train`. With a dev split, every epoch is scored
/// (two-stage prediction, mention F1) and the best epoch's weights are kept.
pub fn train<E>(
    model: &mut Model<E>,
    train: &[AnnotatedSentence],
    dev: Option<&[AnnotatedSentence]>,
) -> Result<TrainHistory, TrainError>
where
    E: TrainableEncoder + Sync,
    E::Weights: Send,
{
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let config = model.config.clone();
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut optimizer = AdamW::new(config.adam_epsilon, config.weight_decay);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Snapshot<E::Weights>)> = None;

    // The plan length is fixed by the split sizes, so the first epoch's
    // count gives the schedule horizon.
    let mut planned = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        planned.push(make_task_batches(
            train,
            &model.ontology,
            config.batch_size,
            config.negative_pair_ratio,
            &mut rng,
        ));
    }
    let total_steps: usize = planned.iter().map(Vec::len).sum();
    let mut step = 0usize;

    for (epoch, batches) in planned.into_iter().enumerate() {
        let (mut id_sum, mut id_n, mut loc_sum, mut loc_n) = (0.0, 0usize, 0.0, 0usize);
        for (index, batch) in batches.iter().enumerate() {
            let batch_id = BatchId { epoch, index };
            let results: Vec<(f64, Grads<E::Weights>)> = match batch {
                TaskBatch::Identification(items) => items
                    .par_iter()
                    .map(|&i| identification_item(model, &train[i]))
                    .collect::<Result<_, _>>()?,
                TaskBatch::Localization(items) => items
                    .par_iter()
                    .map(|p| localization_item(model, &train[p.sentence], p))
                    .collect::<Result<_, _>>()?,
            };
            let mut grads = Grads::zeros(model);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add(g);
            }
            let n = results.len() as f64;
            loss /= n;
            grads.scale(1.0 / n);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::Divergence { batch: batch_id, loss });
            }
            clip_global_norm(&mut [&mut grads.encoder, &mut grads.wavg, &mut grads.crf], config.grad_clip);
            let lr = scheduled_lr(config.learning_rate, step, config.warmup_steps, total_steps);
            optimizer.begin_step();
            optimizer.update(model.encoder.weights_mut(), &grads.encoder, lr);
            optimizer.update(&mut model.head.weights, &grads.wavg, lr);
            optimizer.update(&mut model.crf, &grads.crf, lr);
            step += 1;
            if batch.is_identification() {
                id_sum += loss;
                id_n += 1;
            } else {
                loc_sum += loss;
                loc_n += 1;
            }
            debug!("{batch_id}: loss {loss:.6} lr {lr:.3e}");
        }

        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let dev_report = match dev {
            Some(dev) => {
                let sentences: Vec<Sentence> = dev.iter().map(|s| s.sentence.clone()).collect();
                let pred = predict(model, &sentences, PredictMode::TwoStage)?;
                Some(score_mentions(&pred.sentences, dev).expect("predictions align with dev ids"))
            }
            None => None,
        };
        if let Some(report) = &dev_report {
            if best.as_ref().is_none_or(|(f1, _, _)| report.f1() > *f1) {
                let snap = (model.encoder.weights().clone(), model.head.weights.clone(), model.crf.clone());
                best = Some((report.f1(), epoch, snap));
            }
        }
        let record = EpochRecord {
            epoch,
            steps: batches.len(),
            identification_loss: mean(id_sum, id_n),
            localization_loss: mean(loc_sum, loc_n),
            dev: dev_report,
        };
        info!(
            "epoch {epoch}: id loss {:?}, loc loss {:?}{}",
            record.identification_loss,
            record.localization_loss,
            record.dev.as_ref().map(|r| format!(", dev F1 {:.4}", r.f1())).unwrap_or_default()
        );
        history.epochs.push(record);
    }

    if let Some((_, epoch, (enc, wavg, crf))) = best {
        *model.encoder.weights_mut() = enc;
        model.head.weights = wavg;
        model.crf = crf;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}
