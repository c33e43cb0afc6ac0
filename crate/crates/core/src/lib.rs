//! Few-shot event detection in two stages: cloze-prompt identification of
//! the event types in a sentence, then type-conditioned BIO CRF localization
//! of each type's triggers.

pub mod bio;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod identification;
pub mod localization;
pub mod params;
pub mod training;
pub mod types;
pub mod verbalizer;

pub use types::{AnnotatedSentence, BioTag, EventMention, EventTypeSpec, Ontology, Sentence, TypeScores};
