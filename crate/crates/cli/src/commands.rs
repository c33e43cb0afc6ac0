use std::path::Path;

use evdet::corpus::{
    inject_null_instances, load_corpus, load_ontology, load_sentences, sample_few_shot, save_ontology, save_predictions,
    FewShotSplit, UnknownTypePolicy,
};
use evdet::encoder::{ToyEncoder, ToyEncoderConfig};
use evdet::evaluation::{gold_type_sets, score_identification, score_mentions, summarize_runs, ScoreReport};
use evdet::training::{predict, toy_vocabulary, train, Model, PredictMode, RunConfig};
use evdet::verbalizer::{apply_selection, select_verbalizers};
use evdet::{AnnotatedSentence, Ontology, Sentence};
use log::{info, warn};

use crate::error::CliError;
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            config,
            output,
            report,
            skip_unknown_types,
        } => cmd_train(config.resolve(seed)?, output.as_deref(), report.as_deref(), policy(skip_unknown_types)),
        Command::Predict {
            model,
            input,
            output,
            mode,
        } => cmd_predict(&model, &input, &output, mode),
        Command::Evaluate {
            pred,
            gold,
            identification,
            json,
            output,
        } => cmd_evaluate(&pred, &gold, identification, json, output.as_deref()),
        Command::SelectVerbalizers { config, output } => cmd_select(config.resolve(seed)?, &output),
        Command::SampleSplit {
            input,
            ontology,
            k,
            train_out,
            test_out,
            skip_unknown_types,
        } => {
            let ontology = load_ontology(&ontology)?;
            let corpus = load_corpus(&input, &ontology, policy(skip_unknown_types))?;
            let split = sample_few_shot(&corpus, k, seed.unwrap_or(0))?;
            for (name, n) in split.support(&ontology) {
                if n < k {
                    warn!("`{name}` has only {n} of {k} shots");
                }
            }
            write_jsonl(&train_out, &split.train)?;
            write_jsonl(&test_out, &split.test)?;
            println!("train {} sentences, test {} sentences", split.train.len(), split.test.len());
            Ok(())
        }
        Command::InjectNull {
            train,
            test,
            pool,
            ratio,
            train_out,
            test_out,
            no_mirror,
        } => {
            let split = FewShotSplit {
                train: load_sentences(&train)?,
                test: match &test {
                    Some(p) => load_sentences(p)?,
                    None => Vec::new(),
                },
                k: 0,
                seed: seed.unwrap_or(0),
            };
            let pool = load_sentences(&pool)?;
            let (out, report) = inject_null_instances(&split, ratio, &pool, seed.unwrap_or(0), !no_mirror)?;
            if report.is_short() {
                warn!("NULL pool too small: {report:?}");
            }
            write_jsonl(&train_out, &out.train)?;
            if let Some(p) = &test_out {
                write_jsonl(p, &out.test)?;
            }
            println!(
                "injected {} of {} NULL sentences into train, {} of {} into test",
                report.injected_train, report.requested_train, report.injected_test, report.requested_test
            );
            Ok(())
        }
    }
}

fn policy(skip: bool) -> UnknownTypePolicy {
    if skip {
        UnknownTypePolicy::Skip
    } else {
        UnknownTypePolicy::Fail
    }
}

fn write_jsonl(path: &Path, sentences: &[AnnotatedSentence]) -> Result<(), CliError> {
    save_predictions(path, sentences).map_err(CliError::runtime)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn required<'a>(value: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("`{key}` must be set in the config or with --{}", key.replace('_', "-"))))
}

fn load_training_data(
    config: &RunConfig,
    unknown: UnknownTypePolicy,
) -> Result<(Ontology, Vec<AnnotatedSentence>, Option<Vec<AnnotatedSentence>>), CliError> {
    let ontology = load_ontology(required(&config.ontology, "ontology")?)?;
    let mut train = load_corpus(required(&config.train, "train")?, &ontology, unknown)?.sentences;
    if config.null_ratio > 0.0 {
        let pool = load_sentences(required(&config.null_pool, "null_pool")?)?;
        let split = FewShotSplit {
            train,
            test: Vec::new(),
            k: 0,
            seed: config.seed,
        };
        let (split, report) = inject_null_instances(&split, config.null_ratio, &pool, config.seed, false)?;
        if report.is_short() {
            warn!("NULL pool too small: {report:?}");
        }
        info!("injected {} NULL sentences", report.injected_train);
        train = split.train;
    }
    let dev = match &config.dev {
        Some(p) => Some(load_corpus(p, &ontology, unknown)?.sentences),
        None => None,
    };
    Ok((ontology, train, dev))
}

fn plain(sentences: &[AnnotatedSentence]) -> Vec<Sentence> {
    sentences.iter().map(|s| s.sentence.clone()).collect()
}

fn cmd_train(
    config: RunConfig,
    output: Option<&Path>,
    report: Option<&Path>,
    unknown: UnknownTypePolicy,
) -> Result<(), CliError> {
    let (ontology, data, dev) = load_training_data(&config, unknown)?;
    let mut model = Model::build_toy(config, ontology, &data)?;
    let history = train(&mut model, &data, dev.as_deref())?;

    let pred = predict(&model, &plain(&data), PredictMode::TwoStage)?;
    let mentions = score_mentions(&pred.sentences, &data)?;
    let identification = score_identification(&pred.type_sets(), &gold_type_sets(&data))?;
    if let Some(dir) = output {
        model.save(dir).map_err(CliError::runtime)?;
    }
    if let Some(path) = report {
        let value = serde_json::json!({
            "history": history,
            "train_mentions": mentions,
            "train_identification": identification,
        });
        write_text(path, &(serde_json::to_string_pretty(&value).expect("reports serialize") + "\n"))?;
    }
    print!("{}", mentions.to_table());
    println!("train identification F1 {:.4}", identification.f1());
    println!("train mention F1 {:.4}", mentions.f1());
    Ok(())
}

fn cmd_predict(model_dir: &Path, input: &Path, output: &Path, mode: PredictMode) -> Result<(), CliError> {
    let model = Model::<ToyEncoder>::load(model_dir)?;
    let sentences = load_sentences(input)?;
    let pred = predict(&model, &plain(&sentences), mode)?;
    write_jsonl(output, &pred.sentences)?;
    let mentions: usize = pred.sentences.iter().map(|s| s.mentions.len()).sum();
    println!(
        "{} sentences, {mentions} mentions, {} localizer calls",
        pred.sentences.len(),
        pred.localizer_calls
    );
    Ok(())
}

fn cmd_evaluate(
    preds: &[std::path::PathBuf],
    gold: &Path,
    identification: bool,
    json: bool,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let gold = load_sentences(gold)?;
    let mut reports: Vec<ScoreReport> = Vec::with_capacity(preds.len());
    for path in preds {
        let pred = load_sentences(path)?;
        let report = if identification {
            score_identification(&gold_type_sets(&pred), &gold_type_sets(&gold))?
        } else {
            score_mentions(&pred, &gold)?
        };
        reports.push(report);
    }
    let summary = if reports.len() >= 2 { Some(summarize_runs(&reports)?) } else { None };
    let value = match &summary {
        Some(s) => serde_json::json!({ "runs": reports, "summary": s }),
        None => serde_json::to_value(&reports[0]).expect("reports serialize"),
    };
    let json_text = serde_json::to_string_pretty(&value).expect("reports serialize") + "\n";
    if let Some(path) = output {
        write_text(path, &json_text)?;
    }
    if json {
        print!("{json_text}");
        return Ok(());
    }
    for (path, report) in preds.iter().zip(&reports) {
        if reports.len() > 1 {
            println!("{}", path.display());
        }
        print!("{}", report.to_table());
        println!(
            "precision {:.4} recall {:.4} F1 {:.4}",
            report.precision(),
            report.recall(),
            report.f1()
        );
    }
    if let Some(s) = summary {
        println!("over {} runs: precision {} recall {} F1 {}", s.runs, s.precision, s.recall, s.f1);
    }
    Ok(())
}

fn cmd_select(config: RunConfig, output: &Path) -> Result<(), CliError> {
    let ontology = load_ontology(required(&config.ontology, "ontology")?)?;
    let data = load_corpus(required(&config.train, "train")?, &ontology, UnknownTypePolicy::Fail)?.sentences;
    let vocab = toy_vocabulary(data.iter().map(|s| &s.sentence), &ontology, &config);
    let mut encoder = ToyEncoder::new(
        vocab,
        ToyEncoderConfig {
            embed_dim: config.dim,
            dim: config.dim,
            max_seq_len: config.max_seq_len,
            seed: config.seed,
        },
    );
    let selection = select_verbalizers(&data, &ontology, &mut encoder, &config.prompt, config.verbalizers_per_type)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    for (t, v) in &selection {
        println!("{t}\t{}", v.join(" "));
    }
    save_ontology(output, &apply_selection(&ontology, &selection)).map_err(CliError::runtime)
}
