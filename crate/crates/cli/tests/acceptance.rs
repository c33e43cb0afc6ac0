//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use evdet::corpus::{inject_null_instances, load_corpus, load_ontology, load_sentences, FewShotSplit, UnknownTypePolicy};
use evdet::encoder::{EncodedInput, EncoderError, EncoderOutput, MaskedLanguageModel, Vocabulary};
use evdet::evaluation::{gold_type_sets, mean_stdev, score_identification, score_mentions};
use evdet::identification::{
    decode_identification, margin_loss, margin_loss_and_grad, score_from_logits, threshold_ce_loss,
    threshold_ce_loss_and_grad, AggregationWeights, ClozePrompt, IdentificationHead,
};
use evdet::localization::{
    localization_loss_and_grad, log_partition, sequence_score, viterbi_decode, CrfOptions, CrfParams, EmissionTable,
};
use evdet::params::ParamSet;
use evdet::training::{predict, train, ConfigError, Model, PredictMode, RunConfig};
use evdet::verbalizer::{aggregate, score_candidate, select_verbalizers, Aggregation, CandidateTable};
use evdet::{AnnotatedSentence, BioTag, EventMention, EventTypeSpec, Ontology, Sentence, TypeScores};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_dir() -> PathBuf {
    repo_root().join("data/toy")
}

fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn all_sequences(n: usize) -> Vec<Vec<BioTag>> {
    (0..3usize.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let t = BioTag::from_index(code % 3).unwrap();
                    code /= 3;
                    t
                })
                .collect()
        })
        .collect()
}

fn crf_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 240;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = 1 + trial % 8;
        let options = CrfOptions {
            constrained: trial % 2 == 0,
            ..CrfOptions::default()
        };
        let mut params = CrfParams::zeros(2, options);
        params.transitions = Array2::from_shape_fn((3, 3), |_| rng.random_range(-2.0..2.0));
        params.start = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
        params.end = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
        let e = EmissionTable::new(Array2::from_shape_fn((n, 3), |_| rng.random_range(-3.0..3.0)));

        let seqs = all_sequences(n);
        let scores: Vec<f64> = seqs.iter().map(|s| sequence_score(&e, &params, s)).collect();
        let delta = (log_partition(&e, &params) - lse(&scores)).abs();
        worst = worst.max(delta);
        ensure(delta <= 1e-6, || format!("trial {trial}: |dlogZ| = {delta:e}"))?;

        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
        let decoded = viterbi_decode(&e, &params);
        ensure(decoded == seqs[best], || {
            format!("trial {trial}: viterbi {decoded:?} vs brute force {:?}", seqs[best])
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{trials} instances, n = 1..8, max |dlogZ| {worst:.1e}, Viterbi exact"))
}

const FD_EPS: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn central(f: &mut dyn FnMut(f64) -> f64) -> f64 {
    (f(FD_EPS) - f(-FD_EPS)) / (2.0 * FD_EPS)
}

fn random_scores(rng: &mut ChaCha8Rng, types: usize) -> (TypeScores, BTreeSet<String>) {
    let scores: BTreeMap<String, f64> = (0..types).map(|t| (format!("T{t}"), rng.random_range(-4.0..4.0))).collect();
    let gold = (0..types).filter(|_| rng.random_bool(0.3)).map(|t| format!("T{t}")).collect();
    (TypeScores::new(scores, rng.random_range(-4.0..4.0)), gold)
}

fn with_score(s: &TypeScores, key: Option<&str>, delta: f64) -> TypeScores {
    let mut out = s.clone();
    match key {
        Some(k) => *out.scores.get_mut(k).unwrap() += delta,
        None => out.null_score += delta,
    }
    out
}

fn score_grad_check(
    s: &TypeScores,
    analytic: &TypeScores,
    loss: &dyn Fn(&TypeScores) -> f64,
) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let keys: Vec<Option<String>> = s.scores.keys().cloned().map(Some).chain([None]).collect();
    for key in keys {
        let a = match &key {
            Some(k) => analytic.scores[k],
            None => analytic.null_score,
        };
        let n = central(&mut |d| loss(&with_score(s, key.as_deref(), d)));
        let r = rel_err(a, n);
        worst = worst.max(r);
        ensure(r <= FD_TOL, || format!("{key:?}: analytic {a} numeric {n}"))?;
    }
    Ok(worst)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;

    for _ in 0..50 {
        let (s, gold) = random_scores(&mut rng, 5);
        let (_, g) = threshold_ce_loss_and_grad(&s, &gold);
        worst = worst.max(score_grad_check(&s, &g, &|x| threshold_ce_loss(x, &gold))?);
    }

    let margin = 1.0;
    let mut checked = 0;
    while checked < 50 {
        let (s, gold) = random_scores(&mut rng, 5);
        let near_kink = s
            .scores
            .values()
            .any(|v| ((v - s.null_score).abs() - margin).abs() < 1e-3);
        if near_kink {
            continue;
        }
        let (_, g) = margin_loss_and_grad(&s, &gold, margin);
        worst = worst.max(score_grad_check(&s, &g, &|x| margin_loss(x, &gold, margin))?);
        checked += 1;
    }

    // verbalizer aggregation from mask logits, including learnable weights
    for aggregation in [Aggregation::Avg, Aggregation::Max, Aggregation::LogSumExp, Aggregation::WeightedAvg] {
        let vocab = 12;
        let head = IdentificationHead {
            type_names: vec!["T0".into(), "T1".into(), "T2".into()],
            verbalizer_ids: vec![vec![2, 3, 4], vec![5], vec![6, 7]],
            null_id: 1,
            aggregation,
            weights: AggregationWeights {
                names: vec!["T0".into(), "T1".into(), "T2".into()],
                logits: vec![
                    Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
                    Array1::zeros(1),
                    Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0)),
                ],
            },
        };
        let logits = Array1::from_shape_fn(vocab, |_| rng.random_range(-3.0..3.0));
        let gold: BTreeSet<String> = ["T1".to_string()].into();
        let loss = |l: &Array1<f64>, h: &IdentificationHead| threshold_ce_loss(&score_from_logits(l, h), &gold);
        let (_, d_scores) = threshold_ce_loss_and_grad(&score_from_logits(&logits, &head), &gold);
        let mut g_weights = head.weights.zeros_like();
        let mut dense = Array1::<f64>::zeros(vocab);
        for (id, g) in head.backward(&logits, &d_scores, &mut g_weights) {
            dense[id] += g;
        }
        for id in 0..vocab {
            let n = central(&mut |d| {
                let mut l = logits.clone();
                l[id] += d;
                loss(&l, &head)
            });
            let r = rel_err(dense[id], n);
            worst = worst.max(r);
            ensure(r <= FD_TOL, || format!("{aggregation:?} logit {id}: analytic {} numeric {n}", dense[id]))?;
        }
        for t in 0..3 {
            for k in 0..head.weights.logits[t].len() {
                let n = central(&mut |d| {
                    let mut h = head.clone();
                    h.weights.logits[t][k] += d;
                    loss(&logits, &h)
                });
                let a = g_weights.logits[t][k];
                let r = rel_err(a, n);
                worst = worst.max(r);
                ensure(r <= FD_TOL, || format!("{aggregation:?} weight {t}/{k}: analytic {a} numeric {n}"))?;
            }
        }
    }

    // CRF NLL through the attention-enhanced emissions
    let gold = [BioTag::O, BioTag::B, BioTag::I, BioTag::O, BioTag::B, BioTag::O];
    let mut crf_checks = 0;
    for (attention, constrained, prompt_keys) in [
        (true, true, true),
        (true, true, false),
        (true, false, true),
        (false, true, true),
    ] {
        for trial in 0..3 {
            let options = CrfOptions {
                attention_enabled: attention,
                constrained,
                prompt_keys,
            };
            let dim = 5;
            let mut params = CrfParams::random(dim, options, 10 + trial);
            params.transitions = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
            params.start = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            params.end = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let hidden = Array2::from_shape_fn((9, dim), |_| rng.random_range(-1.0..1.0));
            let tagged: Vec<usize> = (0..6).collect();
            let keys: Vec<usize> = if prompt_keys { (0..9).collect() } else { tagged.clone() };
            let loss = |p: &CrfParams, h: &Array2<f64>| {
                let mut g = p.zeros_like();
                localization_loss_and_grad(h, &tagged, &keys, p, &gold, &mut g).unwrap().0
            };
            let mut grads = params.zeros_like();
            let (_, d_hidden) = localization_loss_and_grad(&hidden, &tagged, &keys, &params, &gold, &mut grads)
                .map_err(|e| e.to_string())?;

            let mut analytic: Vec<(String, usize, f64)> = Vec::new();
            grads.visit(&mut |name, g| analytic.extend(g.iter().enumerate().map(|(i, &v)| (name.to_owned(), i, v))));
            for (name, idx, a) in analytic {
                let n = central(&mut |d| {
                    let mut p = params.clone();
                    p.visit_mut(&mut |k, v| {
                        if k == name {
                            v[idx] += d;
                        }
                    });
                    loss(&p, &hidden)
                });
                // masked transitions have no finite neighbourhood
                if !n.is_finite() {
                    continue;
                }
                let r = rel_err(a, n);
                worst = worst.max(r);
                crf_checks += 1;
                ensure(r <= FD_TOL, || format!("{name}[{idx}] ({options:?}): analytic {a} numeric {n}"))?;
            }
            for ((row, col), &a) in d_hidden.indexed_iter() {
                let n = central(&mut |d| {
                    let mut h = hidden.clone();
                    h[[row, col]] += d;
                    loss(&params, &h)
                });
                let r = rel_err(a, n);
                worst = worst.max(r);
                crf_checks += 1;
                ensure(r <= FD_TOL, || format!("hidden[{row},{col}] ({options:?}): analytic {a} numeric {n}"))?;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "ThresholdCE, margin, 4 aggregators and {crf_checks} CRF/attention partials; max relative error {worst:.1e}"
    ))
}

fn identification_decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ties = 0;
    for i in 0..1000 {
        let types = rng.random_range(1..12);
        let null = rng.random_range(-10.0..10.0);
        let scores: BTreeMap<String, f64> = (0..types)
            .map(|t| {
                let v = if rng.random_bool(0.1) { null } else { rng.random_range(-10.0..10.0) };
                (format!("T{t}"), v)
            })
            .collect();
        ties += scores.values().filter(|&&v| v == null).count();
        let s = TypeScores::new(scores, null);
        let oracle: BTreeSet<String> = s.scores.iter().filter(|(_, &v)| v > s.null_score).map(|(k, _)| k.clone()).collect();
        let decoded = decode_identification(&s);
        ensure(decoded == oracle, || format!("case {i}: {decoded:?} vs {oracle:?}"))?;
        let c = rng.random_range(-100.0..100.0);
        let shifted = decode_identification(&s.shifted(c));
        ensure(shifted == decoded, || format!("case {i}: shift by {c} changed the decoded set"))?;
    }
    Ok(format!("1000 random score sets ({ties} exact ties with NULL), oracle and shift invariance hold"))
}

struct CopyModel {
    vocab: Vocabulary,
}

impl MaskedLanguageModel for CopyModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn dim(&self) -> usize {
        1
    }

    fn max_seq_len(&self) -> usize {
        512
    }

    fn encode(&self, input: &EncodedInput) -> Result<EncoderOutput, EncoderError> {
        let ctx = input.context();
        let mut logits = Array1::zeros(self.vocab.len());
        for &id in &input.subtoken_ids[ctx.start..ctx.end] {
            logits[id] += 1.0;
        }
        Ok(EncoderOutput {
            hidden: Array2::zeros((input.len(), 1)),
            vocab_logits_at_mask: input.mask_position.map(|_| logits),
        })
    }

    fn add_token(&mut self, surface: &str, _init_from: &[&str]) -> Result<usize, EncoderError> {
        self.vocab.id(surface).ok_or_else(|| EncoderError::UnknownToken(surface.to_owned()))
    }
}

fn verbalizer_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0;
    for _ in 0..20 {
        let n_inst = rng.random_range(1..8);
        let n_cand = rng.random_range(1..6);
        let candidates: BTreeSet<String> = (0..n_cand).map(|c| format!("c{c}")).collect();
        let mut table = CandidateTable {
            candidates: candidates.clone(),
            per_instance_ranks: BTreeMap::new(),
        };
        let mut labels = BTreeMap::new();
        for i in 0..n_inst {
            let id = format!("i{i}");
            let mut ranks: Vec<usize> = (1..=n_cand).collect();
            rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut rng);
            for (c, r) in candidates.iter().zip(ranks) {
                if rng.random_bool(0.9) {
                    table.per_instance_ranks.insert((id.clone(), c.clone()), r);
                }
            }
            let types: BTreeSet<String> = ["A", "B", "C"].iter().filter(|_| rng.random_bool(0.5)).map(|t| t.to_string()).collect();
            labels.insert(id, types);
        }
        for c in &candidates {
            for t in ["A", "B", "C"] {
                let mut brute = 0.0;
                for (id, types) in &labels {
                    for ((inst, cand), &r) in &table.per_instance_ranks {
                        if inst == id && cand == c && types.contains(t) {
                            brute += 1.0 / r as f64;
                        }
                    }
                }
                let got = score_candidate(c, t, &table, &labels);
                ensure((got - brute).abs() <= 1e-12, || format!("{c}/{t}: {got} vs {brute}"))?;
                compared += 1;
            }
        }
    }

    // planted corpus: each type's own trigger dominates its sentences; decoys
    // sort first lexicographically and other types' triggers appear as noise
    let planted = [("Quake", "tremor", "aftershock"), ("Sale", "purchase", "acquire"), ("Flood", "deluge", "drench"), ("Strike", "walkout", "boycott")];
    let fillers = ["the", "city", "saw", "a", "big", "on", "monday", "reports", "say"];
    let mut train = Vec::new();
    for (k, (name, word, decoy)) in planted.iter().enumerate() {
        for j in 0..8 {
            let trigger = if j < 6 { *word } else { *decoy };
            let mut tokens: Vec<String> = fillers.iter().take(3 + j % 4).map(|s| s.to_string()).collect();
            let pos = tokens.len();
            tokens.push(trigger.into());
            if j % 3 == 0 {
                tokens.push(planted[(k + 1) % planted.len()].1.into());
            }
            tokens.push("today".into());
            train.push(
                AnnotatedSentence::new(
                    Sentence::new(format!("{k}-{j}"), tokens).unwrap(),
                    vec![EventMention::new(*name, pos, pos)],
                )
                .unwrap(),
            );
        }
    }
    let ontology = Ontology::new(
        planted
            .iter()
            .map(|(name, _, _)| EventTypeSpec::new(*name, vec!["today".into()]).unwrap())
            .collect(),
    )
    .unwrap();
    let words: Vec<String> = train.iter().flat_map(|s| s.sentence.tokens.clone()).chain(["none".to_string()]).collect();
    let mut model = CopyModel {
        vocab: Vocabulary::build(words),
    };
    let selection = select_verbalizers(&train, &ontology, &mut model, &ClozePrompt::default(), 1).map_err(|e| e.to_string())?;
    for (name, word, _) in &planted {
        ensure(selection[*name] == vec![word.to_string()], || format!("{name}: selected {:?}, planted {word}", selection[*name]))?;
    }
    Ok(format!("{compared} reciprocal-rank scores match the double loop; planted trigger selected for all {} types", planted.len()))
}

fn aggregation_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let n = rng.random_range(1..20);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let avg = aggregate(&v, Aggregation::Avg, None).map_err(|e| e.to_string())?;
        let max = aggregate(&v, Aggregation::Max, None).map_err(|e| e.to_string())?;
        let lse = aggregate(&v, Aggregation::LogSumExp, None).map_err(|e| e.to_string())?;
        let slack = 1e-12 * max.abs().max(1.0);
        ensure(avg <= max + slack && max <= lse + slack && lse <= max + (n as f64).ln() + slack, || {
            format!("list {i}: avg {avg} max {max} lse {lse} n {n}")
        })?;
    }
    Ok("avg <= max <= logsumexp <= max + ln n on 1000 random lists".into())
}

fn toy_config() -> RunConfig {
    RunConfig::from_file(&toy_dir().join("toy.cfg")).expect("toy config parses")
}

fn toy_data() -> (Ontology, Vec<AnnotatedSentence>) {
    let ontology = load_ontology(&toy_dir().join("ontology.json")).expect("toy ontology");
    let corpus = load_corpus(&toy_dir().join("train.jsonl"), &ontology, UnknownTypePolicy::Fail).expect("toy corpus");
    (ontology, corpus.sentences)
}

fn plain(s: &[AnnotatedSentence]) -> Vec<Sentence> {
    s.iter().map(|a| a.sentence.clone()).collect()
}

fn fit_toy(config: RunConfig, ontology: &Ontology, data: &[AnnotatedSentence]) -> Result<Model, String> {
    let mut model = Model::build_toy(config, ontology.clone(), data).map_err(|e| e.to_string())?;
    train(&mut model, data, None).map_err(|e| e.to_string())?;
    Ok(model)
}

fn end_to_end_overfit() -> Outcome {
    let start = Instant::now();
    let (ontology, data) = toy_data();
    let nulls = data.iter().filter(|s| s.is_null()).count();
    let multi = data.iter().filter(|s| s.event_types().len() >= 2).count();
    ensure(ontology.len() == 5 && data.len() == 20 && nulls >= 4 && multi >= 2, || {
        format!("toy corpus shape: {} types, {} sentences, {nulls} NULL, {multi} multi-event", ontology.len(), data.len())
    })?;
    let config = toy_config();
    ensure(config.epochs <= 30, || format!("{} epochs", config.epochs))?;
    let model = fit_toy(config, &ontology, &data)?;
    let pred = predict(&model, &plain(&data), PredictMode::TwoStage).map_err(|e| e.to_string())?;
    let mentions = score_mentions(&pred.sentences, &data).map_err(|e| e.to_string())?;
    let id = score_identification(&pred.type_sets(), &gold_type_sets(&data)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(mentions.f1() >= 0.95, || format!("mention F1 {:.4}", mentions.f1()))?;
    ensure(id.f1() >= 0.98, || format!("identification F1 {:.4}", id.f1()))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 sentences ({nulls} NULL, {multi} multi-event), 5 types: mention F1 {:.4}, identification F1 {:.4}",
        mentions.f1(),
        id.f1()
    ))
}

fn null_robustness() -> Outcome {
    let (ontology, data) = toy_data();
    let pool = load_sentences(&toy_dir().join("null_pool.jsonl")).map_err(|e| e.to_string())?;
    let test: Vec<AnnotatedSentence> = data
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.sentence.id = format!("test-{}", s.id());
            s
        })
        .collect();
    let mut details = Vec::new();
    for ratio in [0.2, 0.5, 1.0] {
        let split = FewShotSplit {
            train: data.clone(),
            test: test.clone(),
            k: 0,
            seed: 0,
        };
        let (split, report) = inject_null_instances(&split, ratio, &pool, 11, true).map_err(|e| e.to_string())?;
        ensure(!report.is_short(), || format!("ratio {ratio}: pool too small {report:?}"))?;
        let pool_ids: BTreeSet<&str> = pool.iter().map(|s| s.id()).collect();
        let injected: Vec<AnnotatedSentence> = split.train.iter().filter(|s| pool_ids.contains(s.id())).cloned().collect();
        ensure(injected.len() == report.injected_train, || "injected count mismatch".into())?;
        let model = fit_toy(toy_config(), &ontology, &split.train)?;
        let pred = predict(&model, &plain(&injected), PredictMode::TwoStage).map_err(|e| e.to_string())?;
        let spurious: usize = pred.sentences.iter().map(|s| s.mentions.len()).sum();
        ensure(spurious == 0, || format!("ratio {ratio}: {spurious} mentions on injected NULL sentences"))?;
        let all = predict(&model, &plain(&split.train), PredictMode::TwoStage).map_err(|e| e.to_string())?;
        let f1 = score_mentions(&all.sentences, &split.train).map_err(|e| e.to_string())?.f1();
        details.push(format!("ratio {ratio}: {} NULL injected, 0 mentions, F1 {f1:.4}", injected.len()));
    }
    let mut f1s = Vec::new();
    for seed in 1..=5 {
        let config = RunConfig { seed, ..toy_config() };
        let model = fit_toy(config, &ontology, &data)?;
        let pred = predict(&model, &plain(&data), PredictMode::TwoStage).map_err(|e| e.to_string())?;
        f1s.push(score_mentions(&pred.sentences, &data).map_err(|e| e.to_string())?.f1());
    }
    let summary = mean_stdev(&f1s).map_err(|e| e.to_string())?;
    ensure(summary.stdev <= 0.05, || format!("seed F1s {f1s:?}, stdev {:.4}", summary.stdev))?;
    Ok(format!("{}; 5-seed F1 {summary}", details.join("; ")))
}

fn scorer_exactness() -> Outcome {
    let sent = |id: &str, m: &[(&str, usize, usize)]| AnnotatedSentence {
        sentence: Sentence::from_text(id, "a b c d e f").unwrap(),
        mentions: m.iter().map(|&(t, s, e)| EventMention::new(t, s, e)).collect(),
    };
    let gold = vec![sent("1", &[("A", 0, 0), ("B", 2, 2)]), sent("2", &[("A", 1, 1), ("C", 4, 5)])];
    let pred = vec![sent("1", &[("A", 0, 0), ("B", 3, 3)]), sent("2", &[("A", 1, 1)])];
    let r = score_mentions(&pred, &gold).map_err(|e| e.to_string())?;
    ensure(
        (r.precision() - 2.0 / 3.0).abs() < 1e-12 && (r.recall() - 0.5).abs() < 1e-12 && (r.f1() - 4.0 / 7.0).abs() < 1e-12,
        || format!("P {} R {} F1 {}", r.precision(), r.recall(), r.f1()),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let random_doc = |rng: &mut ChaCha8Rng| -> Vec<AnnotatedSentence> {
        (0..4)
            .map(|i| {
                let m: Vec<(&str, usize, usize)> = (0..rng.random_range(0..4))
                    .map(|_| {
                        let s = rng.random_range(0..5);
                        (["A", "B"][rng.random_range(0..2)], s, s + rng.random_range(0..2))
                    })
                    .collect();
                sent(&i.to_string(), &m)
            })
            .collect()
    };
    for i in 0..100 {
        let p = random_doc(&mut rng);
        let g = random_doc(&mut rng);
        let a = score_mentions(&p, &g).map_err(|e| e.to_string())?;
        let b = score_mentions(&g, &p).map_err(|e| e.to_string())?;
        ensure(a.precision() == b.recall() && a.recall() == b.precision(), || format!("pair {i}: swap asymmetry"))?;
    }
    Ok("fixture P=2/3 R=1/2 F1=4/7 exactly; swap symmetry on 100 random pairs".into())
}

fn full_scale_documented() -> Outcome {
    let readme = std::fs::read_to_string(repo_root().join("README.md")).map_err(|e| format!("README.md: {e}"))?;
    let configs = [
        ("configs/fewevent_5shot.cfg", "bert-base-uncased"),
        ("configs/maven_10shot_null.cfg", "bert-base-uncased"),
        ("configs/ace_plus.cfg", "roberta-large"),
    ];
    for (path, encoder) in configs {
        ensure(readme.contains(path), || format!("README does not document {path}"))?;
        let config = RunConfig::from_file(&repo_root().join(path)).map_err(|e| format!("{path}: {e}"))?;
        ensure(config.encoder == encoder, || format!("{path}: encoder {}", config.encoder))?;
        ensure(matches!(config.validate(), Err(ConfigError::UnsupportedEncoder(_))), || {
            format!("{path} unexpectedly runs without a pretrained encoder")
        })?;
    }
    for script in ["scripts/convert_fewevent.py", "scripts/convert_maven.py", "scripts/convert_ace.py"] {
        ensure(repo_root().join(script).exists() && readme.contains(script), || format!("{script} missing or undocumented"))?;
    }
    Ok("not reproduced at desk scale (needs pretrained encoders and licensed data); commands documented in README".into())
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evdet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn cli_session(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let toy = toy_dir();
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let t = |name: &str| toy.join(name).to_string_lossy().into_owned();
    let common = ["--seed", "7", "--threads", "1"];
    let mut outputs = Vec::new();
    let mut step = |label: &str, args: Vec<String>| -> Result<(), String> {
        let mut all: Vec<&str> = args.iter().map(String::as_str).collect();
        all.extend(common);
        outputs.push((format!("{label} stdout"), run_cli(&all)?));
        Ok(())
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    step("sample-split", s(&["sample-split", "--input", &t("train.jsonl"), "--ontology", &t("ontology.json"), "--k", "2", "--train-out", &p("k.jsonl"), "--test-out", &p("rest.jsonl")]))?;
    step("inject-null", s(&["inject-null", "--train", &p("k.jsonl"), "--test", &p("rest.jsonl"), "--pool", &t("null_pool.jsonl"), "--ratio", "0.5", "--train-out", &p("k_null.jsonl"), "--test-out", &p("rest_null.jsonl")]))?;
    step("train", s(&["train", "--config", &t("toy.cfg"), "--output", &p("ckpt"), "--report", &p("report.json")]))?;
    step("predict", s(&["predict", "--model", &p("ckpt"), "--input", &p("rest_null.jsonl"), "--output", &p("pred.jsonl")]))?;
    step("predict-enumerate", s(&["predict", "--model", &p("ckpt"), "--input", &p("rest_null.jsonl"), "--output", &p("pred_enum.jsonl"), "--mode", "enumerate"]))?;
    step("evaluate", s(&["evaluate", "--pred", &p("pred.jsonl"), "--gold", &p("rest_null.jsonl"), "--json", "--output", &p("eval.json")]))?;
    step("select-verbalizers", s(&["select-verbalizers", "--config", &t("toy.cfg"), "--output", &p("ontology_auto.json")]))?;
    let files = [
        "k.jsonl",
        "rest.jsonl",
        "k_null.jsonl",
        "rest_null.jsonl",
        "ckpt/config.json",
        "ckpt/encoder.json",
        "ckpt/crf.json",
        "ckpt/ontology.json",
        "ckpt/id_head.json",
        "report.json",
        "pred.jsonl",
        "pred_enum.jsonl",
        "eval.json",
        "ontology_auto.json",
    ];
    for f in files {
        let bytes = std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?;
        outputs.push((f.to_owned(), bytes));
    }
    Ok(outputs)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = cli_session(a.path())?;
    let second = cli_session(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, || format!("{name} differs between identical runs"))?;
    }
    Ok(format!("6 commands, {} outputs byte-identical across reruns", first.len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "CRF correctness", crf_correctness),
        (2, "gradient fidelity", gradient_fidelity),
        (3, "identification decoding", identification_decoding),
        (4, "verbalizer selection", verbalizer_selection),
        (5, "aggregation operators", aggregation_ordering),
        (6, "end-to-end overfit", end_to_end_overfit),
        (7, "NULL robustness", null_robustness),
        (8, "scorer exactness", scorer_exactness),
        (9, "full-scale results", full_scale_documented),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
