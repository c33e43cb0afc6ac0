//! Corpus and ontology files, K-per-type few-shot splits and NULL injection.
//!
//! The corpus format is JSONL with one annotated sentence per line:
//!
//! ```text
//! {"id":"s1","tokens":["He","quit"],"mentions":[{"type":"End-Position","start":1,"end":1}]}
//! ```
//!
//! `start` and `end` are inclusive word offsets. Ontologies are a single JSON
//! object `{"types":[{"name","verbalizers","definition"?,"keywords"?}],"null_verbalizer"}`.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AnnotatedSentence, EventMention, Ontology, Sentence, ValidationError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: record `{id}`: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        id: String,
        #[source]
        source: ValidationError,
    },
    #[error("{path}:{line}: record `{id}` uses unknown event type `{event_type}`")]
    UnknownType {
        path: PathBuf,
        line: usize,
        id: String,
        event_type: String,
    },
    #[error("{path}:{line}: duplicate sentence id `{id}`")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("ontology {path}: {source}")]
    Ontology {
        path: PathBuf,
        #[source]
        source: ValidationError,
    },
    #[error("K must be at least 1")]
    InvalidShots,
    #[error("NULL ratio must be a finite non-negative number, got {0}")]
    InvalidRatio(f64),
    #[error("NULL pool sentence `{0}` also appears in the split")]
    PoolOverlap(String),
    #[error("NULL pool sentence `{0}` carries event mentions")]
    NotNull(String),
}

/// What to do with a mention whose type is missing from the ontology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownTypePolicy {
    #[default]
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<AnnotatedSentence>,
    pub ontology: Ontology,
}

impl Corpus {
    /// Validates mention types and id uniqueness.
    pub fn new(sentences: Vec<AnnotatedSentence>, ontology: Ontology) -> Result<Self, ValidationError> {
        let mut ids = HashSet::new();
        for s in &sentences {
            for m in &s.mentions {
                if !ontology.contains(&m.event_type) {
                    return Err(ValidationError::UnknownType(m.event_type.clone()));
                }
            }
            if !ids.insert(s.id().to_owned()) {
                return Err(ValidationError::DuplicateSentenceId(s.id().to_owned()));
            }
        }
        Ok(Corpus { sentences, ontology })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    tokens: Vec<String>,
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    mentions: Vec<EventMention>,
}

fn open(path: &Path) -> Result<File, CorpusError> {
    File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a JSONL corpus, validating every record against `ontology`.
pub fn load_corpus(path: &Path, ontology: &Ontology, policy: UnknownTypePolicy) -> Result<Corpus, CorpusError> {
    let sentences = read_sentences(path, Some(ontology), policy)?;
    Ok(Corpus {
        sentences,
        ontology: ontology.clone(),
    })
}

/// Reads JSONL records without an ontology check (used for prediction inputs
/// and NULL pools).
pub fn load_sentences(path: &Path) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    read_sentences(path, None, UnknownTypePolicy::Fail)
}

fn read_sentences(
    path: &Path,
    ontology: Option<&Ontology>,
    policy: UnknownTypePolicy,
) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let reader = BufReader::new(open(path)?);
    let mut sentences = Vec::new();
    let mut ids = HashSet::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            path: path.to_owned(),
            line: line_no,
            source,
        })?;
        let mut mentions = Vec::with_capacity(raw.mentions.len());
        for m in raw.mentions {
            match ontology {
                Some(o) if !o.contains(&m.event_type) => match policy {
                    UnknownTypePolicy::Fail => {
                        return Err(CorpusError::UnknownType {
                            path: path.to_owned(),
                            line: line_no,
                            id: raw.id,
                            event_type: m.event_type,
                        })
                    }
                    UnknownTypePolicy::Skip => {
                        warn!("{}:{line_no}: skipping mention of unknown type `{}`", path.display(), m.event_type);
                    }
                },
                _ => mentions.push(m),
            }
        }
        let sentence = Sentence {
            id: raw.id.clone(),
            tokens: raw.tokens,
            doc_id: raw.doc_id,
        };
        let annotated = AnnotatedSentence::new(sentence, mentions).map_err(|source| CorpusError::Invalid {
            path: path.to_owned(),
            line: line_no,
            id: raw.id.clone(),
            source,
        })?;
        if !ids.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_owned(),
                line: line_no,
                id: raw.id,
            });
        }
        sentences.push(annotated);
    }
    Ok(sentences)
}

/// Writes sentences in the corpus JSONL schema.
pub fn save_predictions(path: &Path, predictions: &[AnnotatedSentence]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for sentence in predictions {
        let line = serde_json::to_string(sentence).expect("annotated sentences always serialize");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

pub fn load_ontology(path: &Path) -> Result<Ontology, CorpusError> {
    let ontology: Ontology = serde_json::from_reader(BufReader::new(open(path)?)).map_err(|source| {
        CorpusError::Parse {
            path: path.to_owned(),
            line: source.line(),
            source,
        }
    })?;
    ontology.validate().map_err(|source| CorpusError::Ontology {
        path: path.to_owned(),
        source,
    })?;
    Ok(ontology)
}

pub fn save_ontology(path: &Path, ontology: &Ontology) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut writer, ontology).expect("ontology always serializes");
    writeln!(writer).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<AnnotatedSentence>,
    pub test: Vec<AnnotatedSentence>,
    pub k: usize,
    pub seed: u64,
}

impl FewShotSplit {
    /// Number of train sentences bearing each ontology type.
    pub fn support(&self, ontology: &Ontology) -> Vec<(String, usize)> {
        ontology
            .names()
            .map(|name| {
                let n = self
                    .train
                    .iter()
                    .filter(|s| s.mentions.iter().any(|m| m.event_type == name))
                    .count();
                (name.to_owned(), n)
            })
            .collect()
    }
}

/// Samples K train sentences per event type; everything else is test.
///
/// Sentences are visited in a seeded shuffled order. At each step the type
/// with the least support is served first, and a sentence is only taken if
/// it pushes no other type past K. A multi-type sentence counts toward every
/// type it bears. The one exception: a type with zero support may overshoot
/// another type's quota so that every attested type gets at least one example.
pub fn sample_few_shot(corpus: &Corpus, k: usize, seed: u64) -> Result<FewShotSplit, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidShots);
    }
    let types: Vec<&str> = corpus.ontology.names().collect();
    let type_index = |name: &str| types.iter().position(|t| *t == name);
    let sentence_types: Vec<BTreeSet<usize>> = corpus
        .sentences
        .iter()
        .map(|s| s.mentions.iter().filter_map(|m| type_index(&m.event_type)).collect())
        .collect();

    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let available: Vec<usize> = (0..types.len())
        .map(|t| sentence_types.iter().filter(|ts| ts.contains(&t)).count())
        .collect();
    for (t, &n) in available.iter().enumerate() {
        if n == 0 {
            warn!("event type `{}` has no instances; it keeps an empty support set", types[t]);
        }
    }
    let target: Vec<usize> = available.iter().map(|&n| n.min(k)).collect();
    let mut support = vec![0usize; types.len()];
    let mut chosen = vec![false; corpus.sentences.len()];
    let mut stuck = vec![false; types.len()];

    loop {
        let next = (0..types.len())
            .filter(|&t| !stuck[t] && support[t] < target[t])
            .min_by_key(|&t| (support[t], t));
        let Some(t) = next else { break };

        let fits = |i: usize| sentence_types[i].iter().all(|&u| u == t || support[u] < k);
        let candidate = order
            .iter()
            .copied()
            .find(|&i| !chosen[i] && sentence_types[i].contains(&t) && fits(i))
            .or_else(|| {
                (support[t] == 0)
                    .then(|| order.iter().copied().find(|&i| !chosen[i] && sentence_types[i].contains(&t)))
                    .flatten()
            });
        match candidate {
            Some(i) => {
                chosen[i] = true;
                for &u in &sentence_types[i] {
                    support[u] += 1;
                }
            }
            None => stuck[t] = true,
        }
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, sentence) in corpus.sentences.iter().enumerate() {
        if chosen[i] {
            train.push(sentence.clone());
        } else {
            test.push(sentence.clone());
        }
    }
    Ok(FewShotSplit { train, test, k, seed })
}

/// Counts from one NULL injection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InjectionReport {
    pub requested_train: usize,
    pub injected_train: usize,
    pub requested_test: usize,
    pub injected_test: usize,
}

impl InjectionReport {
    pub fn is_short(&self) -> bool {
        self.injected_train < self.requested_train || self.injected_test < self.requested_test
    }
}

/// Adds `round(ratio * |event-bearing train|)` NULL sentences from `pool` to
/// the train set and, when `mirror_test` is set, the same ratio of the
/// event-bearing test set from the rest of the pool. Train is served first
/// when the pool runs short.
pub fn inject_null_instances(
    split: &FewShotSplit,
    ratio: f64,
    pool: &[AnnotatedSentence],
    seed: u64,
    mirror_test: bool,
) -> Result<(FewShotSplit, InjectionReport), CorpusError> {
    if !ratio.is_finite() || ratio < 0.0 {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let ids: HashSet<&str> = split.train.iter().chain(&split.test).map(|s| s.id()).collect();
    for s in pool {
        if ids.contains(s.id()) {
            return Err(CorpusError::PoolOverlap(s.id().to_owned()));
        }
        if !s.is_null() {
            return Err(CorpusError::NotNull(s.id().to_owned()));
        }
    }

    let count = |set: &[AnnotatedSentence]| {
        let bearing = set.iter().filter(|s| !s.is_null()).count();
        (ratio * bearing as f64).round() as usize
    };
    let requested_train = count(&split.train);
    let requested_test = if mirror_test { count(&split.test) } else { 0 };

    let mut shuffled: Vec<&AnnotatedSentence> = pool.iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let injected_train = requested_train.min(shuffled.len());
    let injected_test = requested_test.min(shuffled.len() - injected_train);
    let report = InjectionReport {
        requested_train,
        injected_train,
        requested_test,
        injected_test,
    };
    if report.is_short() {
        warn!(
            "NULL pool holds {} sentences; injecting {injected_train}/{requested_train} train and {injected_test}/{requested_test} test",
            pool.len()
        );
    }

    let mut out = split.clone();
    out.train.extend(shuffled[..injected_train].iter().map(|s| (*s).clone()));
    out.test
        .extend(shuffled[injected_train..injected_train + injected_test].iter().map(|s| (*s).clone()));
    Ok((out, report))
}
