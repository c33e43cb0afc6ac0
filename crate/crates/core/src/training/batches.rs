use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bio::spans_to_bio;
use crate::types::{AnnotatedSentence, BioTag, Ontology};

/// One `(sentence, type)` localization target. Negative pairs carry an
/// all-`O` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalizationPair {
    pub sentence: usize,
    pub event_type: String,
    pub tags: Vec<BioTag>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskBatch {
    /// Sentence indices.
    Identification(Vec<usize>),
    Localization(Vec<LocalizationPair>),
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        match self {
            TaskBatch::Identification(b) => b.len(),
            TaskBatch::Localization(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_identification(&self) -> bool {
        matches!(self, TaskBatch::Identification(_))
    }
}

/// Gold-type pairs for every sentence, in sentence then type order.
pub fn positive_pairs(split: &[AnnotatedSentence]) -> Vec<LocalizationPair> {
    let mut pairs = Vec::new();
    for (i, s) in split.iter().enumerate() {
        for t in s.event_types() {
            match spans_to_bio(&s.spans_of(&t), s.sentence.len()) {
                Ok(tags) => pairs.push(LocalizationPair {
                    sentence: i,
                    event_type: t,
                    tags,
                }),
                Err(e) => warn!("skipping `{t}` on sentence `{}`: {e}", s.id()),
            }
        }
    }
    pairs
}

/// Samples `round(ratio * positives)` absent-type pairs without replacement.
pub fn negative_pairs(
    split: &[AnnotatedSentence],
    ontology: &Ontology,
    positives: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Vec<LocalizationPair> {
    let mut pool = Vec::new();
    for (i, s) in split.iter().enumerate() {
        let present = s.event_types();
        for t in ontology.names().filter(|t| !present.contains(*t)) {
            pool.push((i, t));
        }
    }
    let wanted = ((ratio * positives as f64).round() as usize).min(pool.len());
    pool.shuffle(rng);
    pool.truncate(wanted);
    pool.into_iter()
        .map(|(i, t)| LocalizationPair {
            sentence: i,
            event_type: t.to_owned(),
            tags: vec![BioTag::O; split[i].sentence.len()],
        })
        .collect()
}

fn chunked<T: Clone>(items: &[T], size: usize) -> Vec<Vec<T>> {
    items.chunks(size).map(<[T]>::to_vec).collect()
}

/// One epoch of task batches. Identification and localization batches
/// alternate strictly, starting with identification; the shorter stream is
/// reshuffled and recycled until the longer one is exhausted.
pub fn make_task_batches(
    split: &[AnnotatedSentence],
    ontology: &Ontology,
    batch_size: usize,
    negative_ratio: f64,
    rng: &mut impl Rng,
) -> Vec<TaskBatch> {
    let mut ids: Vec<usize> = (0..split.len()).collect();
    let positives = positive_pairs(split);
    let mut pairs = negative_pairs(split, ontology, positives.len(), negative_ratio, rng);
    pairs.extend(positives.iter().cloned());
    if positives.is_empty() {
        warn!("no event mentions in the training split; only identification batches will run");
        pairs.clear();
    }
    ids.shuffle(rng);
    pairs.shuffle(rng);
    let mut id_batches = chunked(&ids, batch_size);
    let mut loc_batches = chunked(&pairs, batch_size);
    if id_batches.is_empty() || loc_batches.is_empty() {
        return id_batches
            .into_iter()
            .map(TaskBatch::Identification)
            .chain(loc_batches.into_iter().map(TaskBatch::Localization))
            .collect();
    }

    let rounds = id_batches.len().max(loc_batches.len());
    let (n_id, n_loc) = (id_batches.len(), loc_batches.len());
    let mut out = Vec::with_capacity(2 * rounds);
    for r in 0..rounds {
        if r > 0 && r % n_id == 0 {
            ids.shuffle(rng);
            id_batches = chunked(&ids, batch_size);
        }
        if r > 0 && r % n_loc == 0 {
            pairs.shuffle(rng);
            loc_batches = chunked(&pairs, batch_size);
        }
        out.push(TaskBatch::Identification(id_batches[r % n_id].clone()));
        out.push(TaskBatch::Localization(loc_batches[r % n_loc].clone()));
    }
    out
}
