//! Domain data model shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of keywords rendered into a type-aware prompt.
pub const DEFAULT_MAX_KEYWORDS: usize = 3;

/// Verbalizer used for the NULL class unless the ontology overrides it.
pub const DEFAULT_NULL_VERBALIZER: &str = "none";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("sentence `{0}` has no tokens")]
    EmptySentence(String),
    #[error("sentence `{id}`: token {index} contains whitespace")]
    WhitespaceInToken { id: String, index: usize },
    #[error("mention ({start}, {end}) out of bounds for sentence of {len} tokens")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("unknown event type `{0}`")]
    UnknownType(String),
    #[error("event type `{0}` has no verbalizers")]
    NoVerbalizers(String),
    #[error("duplicate sentence id `{0}`")]
    DuplicateSentenceId(String),
    #[error("duplicate event type `{0}` in ontology")]
    DuplicateType(String),
    #[error("null verbalizer `{0}` is also a verbalizer of event type `{1}`")]
    NullVerbalizerReused(String, String),
    #[error("spans ({0}, {1}) and ({2}, {3}) overlap")]
    OverlappingSpans(usize, usize, usize, usize),
    #[error("span ({start}, {end}) does not fit in a sequence of length {len}")]
    SpanOutsideSequence { start: usize, end: usize, len: usize },
}

/// A tokenized context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

impl Sentence {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
    ) -> Result<Self, ValidationError> {
        let sentence = Sentence {
            id: id.into(),
            tokens,
            doc_id: None,
        };
        sentence.validate()?;
        Ok(sentence)
    }

    /// Convenience constructor splitting `text` on whitespace.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self, ValidationError> {
        Self::new(id, text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.tokens.is_empty() {
            return Err(ValidationError::EmptySentence(self.id.clone()));
        }
        for (index, token) in self.tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(ValidationError::WhitespaceInToken {
                    id: self.id.clone(),
                    index,
                });
            }
        }
        Ok(())
    }
}

/// A typed trigger span; both indices are inclusive word offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventMention {
    #[serde(rename = "type")]
    pub event_type: String,
    #[serde(rename = "start")]
    pub trigger_start: usize,
    #[serde(rename = "end")]
    pub trigger_end: usize,
}

impl EventMention {
    pub fn new(event_type: impl Into<String>, trigger_start: usize, trigger_end: usize) -> Self {
        EventMention {
            event_type: event_type.into(),
            trigger_start,
            trigger_end,
        }
    }

    pub fn span(&self) -> (usize, usize) {
        (self.trigger_start, self.trigger_end)
    }

    pub fn check_bounds(&self, len: usize) -> Result<(), ValidationError> {
        if self.trigger_start > self.trigger_end || self.trigger_end >= len {
            return Err(ValidationError::SpanOutOfBounds {
                start: self.trigger_start,
                end: self.trigger_end,
                len,
            });
        }
        Ok(())
    }
}

/// A sentence with its (possibly empty) set of event mentions. An empty
/// mention list is a NULL instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    #[serde(flatten)]
    pub sentence: Sentence,
    #[serde(default)]
    pub mentions: Vec<EventMention>,
}

impl AnnotatedSentence {
    /// Builds an annotated sentence, validating spans and dropping duplicate
    /// `(type, start, end)` triples while keeping first-seen order.
    pub fn new(sentence: Sentence, mentions: Vec<EventMention>) -> Result<Self, ValidationError> {
        sentence.validate()?;
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(mentions.len());
        for mention in mentions {
            mention.check_bounds(sentence.len())?;
            if seen.insert(mention.clone()) {
                kept.push(mention);
            }
        }
        Ok(AnnotatedSentence {
            sentence,
            mentions: kept,
        })
    }

    pub fn null(sentence: Sentence) -> Self {
        AnnotatedSentence {
            sentence,
            mentions: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn is_null(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn event_types(&self) -> BTreeSet<String> {
        self.mentions.iter().map(|m| m.event_type.clone()).collect()
    }

    /// Trigger spans of one event type, sorted by start.
    pub fn spans_of(&self, event_type: &str) -> Vec<(usize, usize)> {
        let mut spans: Vec<_> = self
            .mentions
            .iter()
            .filter(|m| m.event_type == event_type)
            .map(EventMention::span)
            .collect();
        spans.sort_unstable();
        spans.dedup();
        spans
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTypeSpec {
    pub name: String,
    pub verbalizers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
}

impl EventTypeSpec {
    pub fn new(name: impl Into<String>, verbalizers: Vec<String>) -> Result<Self, ValidationError> {
        let name = name.into();
        if verbalizers.is_empty() {
            return Err(ValidationError::NoVerbalizers(name));
        }
        Ok(EventTypeSpec {
            name,
            verbalizers,
            definition: None,
            keywords: Vec::new(),
        })
    }

    pub fn with_definition(mut self, definition: impl Into<String>) -> Self {
        self.definition = Some(definition.into());
        self
    }

    pub fn with_keywords(mut self, keywords: Vec<String>) -> Self {
        self.keywords = keywords;
        self
    }

    /// The verbalizer used to fill the cloze prompt.
    pub fn primary_verbalizer(&self) -> &str {
        &self.verbalizers[0]
    }

    pub fn capped_keywords(&self, max: usize) -> &[String] {
        &self.keywords[..self.keywords.len().min(max)]
    }
}

fn default_null_verbalizer() -> String {
    DEFAULT_NULL_VERBALIZER.to_owned()
}

/// The closed set of event types for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub types: Vec<EventTypeSpec>,
    #[serde(default = "default_null_verbalizer")]
    pub null_verbalizer: String,
}

impl Ontology {
    pub fn new(types: Vec<EventTypeSpec>) -> Result<Self, ValidationError> {
        let ontology = Ontology {
            types,
            null_verbalizer: default_null_verbalizer(),
        };
        ontology.validate()?;
        Ok(ontology)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut names = HashSet::new();
        for spec in &self.types {
            if !names.insert(spec.name.as_str()) {
                return Err(ValidationError::DuplicateType(spec.name.clone()));
            }
            if spec.verbalizers.is_empty() {
                return Err(ValidationError::NoVerbalizers(spec.name.clone()));
            }
            if spec.verbalizers.iter().any(|v| *v == self.null_verbalizer) {
                return Err(ValidationError::NullVerbalizerReused(
                    self.null_verbalizer.clone(),
                    spec.name.clone(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&EventTypeSpec> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }
}

/// The three type-agnostic tags of the localization CRF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BioTag {
    O,
    B,
    I,
}

impl BioTag {
    pub const COUNT: usize = 3;
    pub const ALL: [BioTag; 3] = [BioTag::O, BioTag::B, BioTag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<BioTag> {
        BioTag::ALL.get(index).copied()
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BioTag::O => "O",
            BioTag::B => "B",
            BioTag::I => "I",
        };
        f.write_str(s)
    }
}

/// Identification logits for one sentence: one entry per ontology type plus
/// the NULL verbalizer logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub scores: BTreeMap<String, f64>,
    pub null_score: f64,
}

impl TypeScores {
    pub fn new(scores: BTreeMap<String, f64>, null_score: f64) -> Self {
        TypeScores { scores, null_score }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scores.get(name).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.null_score.is_finite() && self.scores.values().all(|s| s.is_finite())
    }

    /// Adds `c` to every logit, NULL included.
    pub fn shifted(&self, c: f64) -> TypeScores {
        TypeScores {
            scores: self.scores.iter().map(|(k, v)| (k.clone(), v + c)).collect(),
            null_score: self.null_score + c,
        }
    }
}
