#![allow(dead_code)]

use std::path::PathBuf;

use evdet::corpus::{load_corpus, load_ontology, Corpus, UnknownTypePolicy};
use evdet::training::RunConfig;
use evdet::{AnnotatedSentence, Ontology, Sentence};

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

pub fn toy_ontology() -> Ontology {
    load_ontology(&toy_dir().join("ontology.json")).unwrap()
}

pub fn toy_corpus() -> Corpus {
    load_corpus(&toy_dir().join("train.jsonl"), &toy_ontology(), UnknownTypePolicy::Fail).unwrap()
}

pub fn toy_null_pool() -> Vec<AnnotatedSentence> {
    evdet::corpus::load_sentences(&toy_dir().join("null_pool.jsonl")).unwrap()
}

pub fn toy_config() -> RunConfig {
    RunConfig::from_file(&toy_dir().join("toy.cfg")).unwrap()
}

pub fn plain(sentences: &[AnnotatedSentence]) -> Vec<Sentence> {
    sentences.iter().map(|s| s.sentence.clone()).collect()
}
