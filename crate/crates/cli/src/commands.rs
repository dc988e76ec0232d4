use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use adam_core::agents::{
    classify_sample, healthy_reference, render_report, AdamPipeline, AgentConfig, AgentServices,
    ClassificationReport, LlmBackend, MockLlm, RemoteLlm, RemoteLlmConfig, Retriever,
    CLASSIFICATION_MODEL, SUMMARIZATION_MODEL,
};
use adam_core::chunker::{load_corpus, segment_count, ChunkParams, CorpusRecord};
use adam_core::dataset::{
    draw_eval_cohort, parse_samples, split_grouped_stratified, study_labels, write_samples, Label,
    SampleSet, Schema,
};
use adam_core::embedding::{EmbeddingBackend, HashingBackend, RemoteBackend, RemoteConfig};
use adam_core::ensemble::{
    from_document, to_document, train_model, Model, ModelKind, TrainOptions,
};
use adam_core::stats::{
    compare_models_centered, read_trials, render_trial_table, run_seeded_trials, write_trials,
    Center, ModelTag, ProtocolConfig, TrialResult,
};
use adam_core::synthetic::{generate, synthetic_corpus, SyntheticConfig};
use adam_core::vectorstore::{index_corpus, CollectionSet, Routing};

use crate::config::{Backend, RunConfig};
use crate::Command;

pub fn dispatch(cmd: &Command, c: &RunConfig, out: &Path) -> Result<()> {
    match cmd {
        Command::Generate {
            samples,
            positives,
            documents,
        } => cmd_generate(c, out, *samples, *positives, *documents),
        Command::Ingest => cmd_ingest(c, out),
        Command::Index { verify: false } => cmd_index(c, out),
        Command::Index { verify: true } => cmd_verify(c, out),
        Command::Train { .. } => cmd_train(c, out),
        Command::Classify => cmd_classify(c, out),
        Command::Evaluate {
            seed_list, models, ..
        } => cmd_evaluate(c, out, seed_list.as_deref(), models),
        Command::Compare {
            adam,
            baseline,
            adam_model,
            baseline_model,
            center,
        } => cmd_compare(
            out,
            adam,
            baseline,
            adam_model.as_deref(),
            baseline_model.as_deref(),
            center,
        ),
        Command::Report { sample } => cmd_report(out, sample.as_deref()),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(c: &RunConfig) -> Result<SampleSet> {
    let path = c.require(&c.dataset, "dataset")?;
    let schema_path = match &c.schema {
        Some(p) => p.clone(),
        None => path.with_file_name("schema.toml"),
    };
    let schema = Schema::load(&schema_path)
        .with_context(|| format!("loading schema {}", schema_path.display()))?;
    let parsed =
        parse_samples(path, &schema).with_context(|| format!("parsing {}", path.display()))?;
    for r in &parsed.rejected {
        log::warn!("rejected line {}: {}", r.line, r.reason);
    }
    Ok(parsed.set)
}

fn chunk_params(c: &RunConfig) -> ChunkParams {
    ChunkParams {
        segment_length: c.segment_length,
        overlap: c.overlap,
    }
}

fn embedder(c: &RunConfig) -> Result<Box<dyn EmbeddingBackend>> {
    Ok(match c.embedding_backend {
        Backend::Mock => Box::new(HashingBackend::new(c.embedding_dimension)),
        Backend::Remote => {
            let config = RemoteConfig {
                dimension: c.embedding_dimension,
                ..Default::default()
            };
            Box::new(RemoteBackend::from_env(config)?)
        }
    })
}

fn llms(c: &RunConfig) -> Result<(Box<dyn LlmBackend>, Box<dyn LlmBackend>)> {
    Ok(match c.llm_backend {
        Backend::Mock => (
            Box::new(MockLlm::new(c.decision_threshold)),
            Box::new(MockLlm::new(c.decision_threshold)),
        ),
        Backend::Remote => {
            let cfg = |model: &str| RemoteLlmConfig {
                model: model.into(),
                ..Default::default()
            };
            (
                Box::new(RemoteLlm::from_env(cfg(SUMMARIZATION_MODEL))?),
                Box::new(RemoteLlm::from_env(cfg(CLASSIFICATION_MODEL))?),
            )
        }
    })
}

fn agent_config(c: &RunConfig) -> AgentConfig {
    AgentConfig {
        top_k: c.top_k,
        similarity_threshold: c.similarity_threshold,
        summarization_budget: c.summarization_budget,
        classification_budget: c.classification_budget,
        fallback_threshold: c.decision_threshold,
        ..Default::default()
    }
}

fn protocol(c: &RunConfig) -> ProtocolConfig {
    ProtocolConfig {
        train_fraction: c.train_fraction,
        cohort_positive: c.cohort_positive,
        cohort_negative: c.cohort_negative,
        threshold: c.decision_threshold,
        train: TrainOptions {
            tuning_trials: c.tuning_trials,
            ..Default::default()
        },
        tolerate_failures: false,
    }
}

fn cmd_generate(
    c: &RunConfig,
    out: &Path,
    samples: usize,
    positives: usize,
    documents: usize,
) -> Result<()> {
    let set = generate(&SyntheticConfig {
        n_samples: samples,
        n_positive: positives,
        seed: c.seed,
        ..Default::default()
    })?;
    let (text, schema) = write_samples(&set, b',');
    write(&out.join("dataset.csv"), text)?;
    write(&out.join("schema.toml"), schema.to_toml())?;
    let mut corpus = String::new();
    for d in synthetic_corpus(documents, c.seed) {
        corpus.push_str(&serde_json::to_string(&d)?);
        corpus.push('\n');
    }
    write(&out.join("corpus.jsonl"), corpus)?;
    println!(
        "wrote {} samples ({} positive) and {} documents to {}",
        set.len(),
        set.count_label(Label::Positive),
        documents,
        out.display()
    );
    Ok(())
}

fn dataset_summary(set: &SampleSet) -> String {
    let pos = set.count_label(Label::Positive);
    let studies = study_labels(set);
    let mut visits: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &set.samples {
        *visits.entry(s.study_id.as_str()).or_default() += 1;
    }
    let mut per: BTreeMap<usize, usize> = BTreeMap::new();
    for v in visits.values() {
        *per.entry(*v).or_default() += 1;
    }
    let mut out = String::new();
    let _ = writeln!(out, "samples: {}", set.len());
    let _ = writeln!(
        out,
        "positive samples: {} ({:.2}%)",
        pos,
        100.0 * pos as f64 / set.len() as f64
    );
    let _ = writeln!(out, "participants: {}", studies.len());
    let _ = writeln!(
        out,
        "positive participants: {}",
        studies.values().filter(|l| l.is_positive()).count()
    );
    for (v, n) in per {
        let _ = writeln!(out, "participants with {v} visit(s): {n}");
    }
    let _ = writeln!(out, "clinical features: {}", set.feature_order.len());
    let _ = writeln!(out, "taxa: {}", set.taxon_order.len());
    out
}

fn cmd_ingest(c: &RunConfig, out: &Path) -> Result<()> {
    let path = c.require(&c.dataset, "dataset")?;
    let schema_path = c
        .schema
        .clone()
        .unwrap_or_else(|| path.with_file_name("schema.toml"));
    let schema = Schema::load(&schema_path)?;
    let parsed = parse_samples(path, &schema)?;
    let mut text = dataset_summary(&parsed.set);
    let _ = writeln!(text, "rejected rows: {}", parsed.rejected.len());
    for r in &parsed.rejected {
        let _ = writeln!(text, "  line {}: {}", r.line, r.reason);
    }
    write(&out.join("ingest_summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn load_corpus_cfg(c: &RunConfig) -> Result<Vec<CorpusRecord>> {
    let path = c.require(&c.corpus, "corpus")?;
    load_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn cmd_index(c: &RunConfig, out: &Path) -> Result<()> {
    let corpus = load_corpus_cfg(c)?;
    let backend = embedder(c)?;
    let set = index_corpus(
        &corpus,
        chunk_params(c),
        backend.as_ref(),
        &Routing::default(),
        c.embed_batch_size,
    )?;
    let dir = c.store_dir(out);
    set.save(&dir)?;
    for (name, col) in &set.collections {
        println!("{name}: {} records", col.len());
    }
    println!(
        "total: {} records from {} documents in {}",
        set.total_records(),
        corpus.len(),
        dir.display()
    );
    Ok(())
}

/// Recounts stored records per collection against the chunk counts implied
/// by the corpus.
fn cmd_verify(c: &RunConfig, out: &Path) -> Result<()> {
    let corpus = load_corpus_cfg(c)?;
    let dir = c.store_dir(out);
    let set = CollectionSet::load(&dir, Some(c.embedding_dimension))?;
    let routing = Routing::default();
    let mut expected: BTreeMap<String, usize> = routing
        .names()
        .into_iter()
        .map(|n| (n.to_string(), 0))
        .collect();
    for d in &corpus {
        let n = segment_count(d.text.chars().count(), chunk_params(c))?;
        *expected
            .entry(routing.route(&d.keywords).to_string())
            .or_default() += n;
    }
    let mut ok = true;
    for (name, want) in &expected {
        let got = set.collections.get(name).map_or(0, |c| c.len());
        println!("{name}: {got} records (expected {want})");
        ok &= got == *want;
    }
    let total: usize = expected.values().sum();
    println!("total: {} records (expected {total})", set.total_records());
    ensure!(
        ok && set.total_records() == total,
        "store does not match the corpus"
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    learner: String,
    seed: u64,
    train_samples: usize,
    features: &'a [String],
    hyperparams: adam_core::ensemble::HyperParams,
    tuning_best_score: Option<f64>,
    tuning_best_trial: Option<usize>,
}

fn cmd_train(c: &RunConfig, out: &Path) -> Result<()> {
    let data = load_dataset(c)?;
    let kind: ModelKind = c.learner.parse().map_err(anyhow::Error::msg)?;
    let (train, _) = split_grouped_stratified(&data, c.train_fraction, c.seed)?;
    let opts = TrainOptions {
        tuning_trials: c.tuning_trials,
        ..Default::default()
    };
    let t = train_model(&train, kind, &opts, c.seed)?;
    let path = c.model_path(out);
    write(&path, to_document(&t.bundle))?;
    let summary = TrainSummary {
        learner: kind.to_string(),
        seed: c.seed,
        train_samples: train.len(),
        features: t.bundle.model.feature_order(),
        hyperparams: t.bundle.hyperparams,
        tuning_best_score: t.tuning.as_ref().map(|o| o.best_score),
        tuning_best_trial: t.tuning.as_ref().map(|o| o.best_trial),
    };
    write(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "trained {} on {} samples with {} features; model written to {}",
        kind,
        train.len(),
        summary.features.len(),
        path.display()
    );
    Ok(())
}

fn load_store(c: &RunConfig, out: &Path) -> Result<CollectionSet> {
    let dir = c.store_dir(out);
    if dir.exists() {
        Ok(CollectionSet::load(&dir, Some(c.embedding_dimension))?)
    } else {
        log::warn!("no store at {}; retrieval disabled", dir.display());
        Ok(CollectionSet::default())
    }
}

#[derive(Serialize, Deserialize)]
struct VerdictRow {
    sample_id: String,
    study_id: String,
    label: u8,
    probability: f64,
    verdict: String,
    summarization_tokens: usize,
    classification_tokens: usize,
}

fn cmd_classify(c: &RunConfig, out: &Path) -> Result<()> {
    let data = load_dataset(c)?;
    let path = c.model_path(out);
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading model {}", path.display()))?;
    let bundle = from_document::<f64>(&text)?;
    let Model::Gbdt(model) = &bundle.model else {
        bail!(
            "classify needs a boosted-tree model, found {}",
            bundle.model.kind()
        );
    };
    let (train, test) = split_grouped_stratified(&data, c.train_fraction, c.seed)?;
    let cohort = draw_eval_cohort(&test, c.cohort_positive, c.cohort_negative, c.seed)?;
    let reference = healthy_reference(&train);
    let store = load_store(c, out)?;
    let embed = embedder(c)?;
    let (summarizer, classifier) = llms(c)?;
    let agent = agent_config(c);
    let services = AgentServices {
        retriever: Retriever {
            collections: &store,
            embedder: embed.as_ref(),
        },
        summarizer: summarizer.as_ref(),
        classifier: classifier.as_ref(),
        config: &agent,
    };
    let reports: Vec<ClassificationReport> = {
        use rayon::prelude::*;
        cohort
            .samples
            .par_iter()
            .map(|s| {
                classify_sample(s, &data, model, &bundle.imputer, &reference, &services)
                    .with_context(|| format!("sample {}", s.sample_id))
            })
            .collect::<Result<_>>()?
    };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut correct = 0;
    for (s, r) in cohort.samples.iter().zip(&reports) {
        write(
            &out.join("reports").join(format!("{}.md", r.sample_id)),
            render_report(r),
        )?;
        correct += usize::from(r.verdict.is_positive() == s.label.is_positive());
        wtr.serialize(VerdictRow {
            sample_id: r.sample_id.clone(),
            study_id: s.study_id.clone(),
            label: s.label.as_u8(),
            probability: r.probability,
            verdict: r.verdict.to_string(),
            summarization_tokens: r.tokens.summarization_prompt,
            classification_tokens: r.tokens.classification_prompt,
        })?;
    }
    write(&out.join("verdicts.csv"), wtr.into_inner()?)?;
    write(
        &out.join("classifications.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    println!(
        "classified {} samples ({} positive, {} negative); {} correct; reports in {}",
        cohort.len(),
        cohort.count_label(Label::Positive),
        cohort.count_label(Label::Negative),
        correct,
        out.join("reports").display()
    );
    Ok(())
}

fn cmd_evaluate(
    c: &RunConfig,
    out: &Path,
    seed_list: Option<&[u64]>,
    models: &[String],
) -> Result<()> {
    let data = load_dataset(c)?;
    let tags = models
        .iter()
        .map(|m| m.parse::<ModelTag>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    ensure!(!tags.is_empty(), "no models requested");
    let seeds: Vec<u64> = match seed_list {
        Some(s) => s.to_vec(),
        None => (0..c.seeds as u64).map(|i| c.seed + i).collect(),
    };
    let run = if tags.contains(&ModelTag::Adam) {
        let store = load_store(c, out)?;
        let embed = embedder(c)?;
        let (summarizer, classifier) = llms(c)?;
        let agent = agent_config(c);
        let pipeline = AdamPipeline {
            services: AgentServices {
                retriever: Retriever {
                    collections: &store,
                    embedder: embed.as_ref(),
                },
                summarizer: summarizer.as_ref(),
                classifier: classifier.as_ref(),
                config: &agent,
            },
        };
        run_seeded_trials(&data, &protocol(c), &seeds, &tags, Some(&pipeline))?
    } else {
        run_seeded_trials(&data, &protocol(c), &seeds, &tags, None)?
    };
    let mut csv = Vec::new();
    write_trials(&mut csv, &run.results)?;
    write(&out.join("trials.csv"), csv)?;
    let table = render_trial_table(&run.results);
    write(&out.join("evaluation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn read_trial_file(path: &Path, model: Option<&str>) -> Result<Vec<TrialResult>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = read_trials(f).with_context(|| format!("reading {}", path.display()))?;
    if let Some(m) = model {
        let tag: ModelTag = m.parse().map_err(anyhow::Error::msg)?;
        rows.retain(|r| r.model == tag);
    }
    let mut tags: Vec<ModelTag> = rows.iter().map(|r| r.model).collect();
    tags.sort();
    tags.dedup();
    ensure!(
        tags.len() == 1,
        "{} holds {} models; pick one with --adam-model/--baseline-model",
        path.display(),
        tags.len()
    );
    Ok(rows)
}

fn cmd_compare(
    out: &Path,
    adam: &Path,
    baseline: &Path,
    adam_model: Option<&str>,
    baseline_model: Option<&str>,
    center: &str,
) -> Result<()> {
    let center: Center = center.parse().map_err(anyhow::Error::msg)?;
    let a = read_trial_file(adam, adam_model)?;
    let b = read_trial_file(baseline, baseline_model)?;
    let summary = compare_models_centered(&a, &b, center)?;
    write(&out.join("comparison.txt"), summary.to_key_value())?;
    print!("{}", summary.to_table());
    Ok(())
}

fn cmd_report(out: &Path, sample: Option<&str>) -> Result<()> {
    let path = out.join("classifications.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}; run classify first", path.display()))?;
    let reports: Vec<ClassificationReport> = serde_json::from_str(&text)?;
    match sample {
        Some(id) => {
            let r = reports
                .iter()
                .find(|r| r.sample_id == id)
                .with_context(|| format!("no classification for {id}"))?;
            print!("{}", render_report(r));
        }
        None => {
            for r in &reports {
                write(
                    &out.join("reports").join(format!("{}.md", r.sample_id)),
                    render_report(r),
                )?;
            }
            println!("rendered {} reports", reports.len());
        }
    }
    Ok(())
}
