//! Checkpoint directory: `config.json`, `encoder.json`, `crf.json`,
//! `ontology.json` and `id_head.json`. Floats round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::{Model, RunConfig};
use crate::encoder::MaskedLanguageModel;
use crate::identification::IdentificationHead;
use crate::localization::CrfParams;
use crate::types::Ontology;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint is inconsistent: {0}")]
    Mismatch(String),
}

const FILES: [&str; 5] = ["config.json", "encoder.json", "crf.json", "ontology.json", "id_head.json"];

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), CheckpointError> {
    let path = dir.join(name);
    let text = serde_json::to_string(value).map_err(|source| CheckpointError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text).map_err(|source| CheckpointError::Io { path, source })
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T, CheckpointError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|source| CheckpointError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path, source })
}

impl<E: MaskedLanguageModel + Serialize + DeserializeOwned> Model<E> {
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_owned(),
            source,
        })?;
        write_json(dir, FILES[0], &self.config)?;
        write_json(dir, FILES[1], &self.encoder)?;
        write_json(dir, FILES[2], &self.crf)?;
        write_json(dir, FILES[3], &self.ontology)?;
        write_json(dir, FILES[4], &self.head)
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let config: RunConfig = read_json(dir, FILES[0])?;
        let encoder: E = read_json(dir, FILES[1])?;
        let crf: CrfParams = read_json(dir, FILES[2])?;
        let ontology: Ontology = read_json(dir, FILES[3])?;
        let head: IdentificationHead = read_json(dir, FILES[4])?;
        ontology
            .validate()
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let names: Vec<&str> = ontology.names().collect();
        if head.type_names != names {
            return Err(CheckpointError::Mismatch("identification head and ontology list different types".into()));
        }
        let vocab = encoder.vocab().len();
        if head.verbalizer_ids.iter().flatten().chain([&head.null_id]).any(|&id| id >= vocab) {
            return Err(CheckpointError::Mismatch("verbalizer id outside the encoder vocabulary".into()));
        }
        if crf.dim() != encoder.dim() {
            return Err(CheckpointError::Mismatch(format!(
                "CRF dimension {} but encoder dimension {}",
                crf.dim(),
                encoder.dim()
            )));
        }
        Ok(Model {
            config,
            ontology,
            encoder,
            head,
            crf,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;
    use crate::training::{predict, train, PredictMode};
    use crate::types::{AnnotatedSentence, EventMention, EventTypeSpec, Sentence};

    #[test]
    fn save_load_predict_is_bit_identical() {
        let ontology = Ontology::new(vec![EventTypeSpec::new("Attack", vec!["attack".into()]).unwrap()]).unwrap();
        let data = vec![
            AnnotatedSentence::new(
                Sentence::from_text("1", "rebels attack the town").unwrap(),
                vec![EventMention::new("Attack", 1, 1)],
            )
            .unwrap(),
            AnnotatedSentence::null(Sentence::from_text("2", "a quiet day").unwrap()),
        ];
        let config = RunConfig {
            epochs: 2,
            batch_size: 1,
            learning_rate: 0.05,
            ..RunConfig::default()
        };
        let mut model = Model::build_toy(config, ontology, &data).unwrap();
        train(&mut model, &data, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Model::<ToyEncoder>::load(dir.path()).unwrap();
        assert_eq!(loaded, model);

        let sentences: Vec<Sentence> = data.iter().map(|s| s.sentence.clone()).collect();
        let a = predict(&model, &sentences, PredictMode::TwoStage).unwrap();
        let b = predict(&loaded, &sentences, PredictMode::TwoStage).unwrap();
        assert_eq!(a, b);
        for s in &sentences {
            let x = model.score_types(s).unwrap();
            let y = loaded.score_types(s).unwrap();
            assert_eq!(x.null_score.to_bits(), y.null_score.to_bits());
        }
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        match Model::<ToyEncoder>::load(dir.path()) {
            Err(CheckpointError::Io { path, .. }) => assert!(path.ends_with("config.json")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
