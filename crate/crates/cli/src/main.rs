mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Backend, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "adam",
    version,
    about = "Microbiome and clinical Alzheimer's classification with retrieval-augmented agents"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for every artifact of the run.
    #[arg(long, global = true, default_value = "adam-out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Backend for both the embedding and language-model services.
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[arg(long, global = true, value_enum)]
    embedding_backend: Option<Backend>,
    #[arg(long, global = true, value_enum)]
    llm_backend: Option<Backend>,
    #[arg(long, global = true)]
    embedding_dimension: Option<usize>,
    #[arg(long, global = true)]
    segment_length: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    similarity_threshold: Option<f64>,
    #[arg(long, global = true)]
    summarization_budget: Option<usize>,
    #[arg(long, global = true)]
    classification_budget: Option<usize>,
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
    #[arg(long, global = true)]
    cohort_positive: Option<usize>,
    #[arg(long, global = true)]
    cohort_negative: Option<usize>,
    #[arg(long, global = true)]
    decision_threshold: Option<f64>,
    /// Master seed for split, cohort, tuning and fitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tuning_trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset, schema and literature corpus.
    Generate {
        #[arg(long, default_value_t = 335)]
        samples: usize,
        #[arg(long, default_value_t = 110)]
        positives: usize,
        #[arg(long, default_value_t = 12)]
        documents: usize,
    },
    /// Validate a dataset and print its summary.
    Ingest,
    /// Chunk, embed and store the literature corpus.
    Index {
        /// Recount the stored records against the corpus instead of indexing.
        #[arg(long)]
        verify: bool,
    },
    /// Select features, tune and fit a model on the training partition.
    Train {
        #[arg(long)]
        learner: Option<String>,
    },
    /// Run the agent pipeline over the evaluation cohort and write reports.
    Classify,
    /// Run seeded trials and print mean ± std per metric per model.
    Evaluate {
        /// Number of seeds, starting at the master seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Explicit comma-separated seeds.
        #[arg(long, value_delimiter = ',', conflicts_with = "seeds")]
        seed_list: Option<Vec<u64>>,
        /// Comma-separated models among gbdt, rf, lr, adam.
        #[arg(long, value_delimiter = ',', default_value = "gbdt,rf,lr")]
        models: Vec<String>,
    },
    /// Compare the F1 distributions of two trial files.
    Compare {
        /// Trials of the first model (the agent pipeline, conventionally).
        adam: PathBuf,
        /// Trials of the baseline.
        baseline: PathBuf,
        /// Keep only rows of this model from the first file.
        #[arg(long)]
        adam_model: Option<String>,
        /// Keep only rows of this model from the second file.
        #[arg(long)]
        baseline_model: Option<String>,
        #[arg(long, default_value = "mean")]
        center: String,
    },
    /// Re-render stored classifications as reports.
    Report {
        /// Print only this sample's report.
        #[arg(long)]
        sample: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Ingest => "ingest",
            Command::Index { .. } => "index",
            Command::Train { .. } => "train",
            Command::Classify => "classify",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(cli.config.as_deref())?;
    let o = &cli.overrides;
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { c.$f = v.into(); } )* };
    }
    set!(dataset, schema, corpus, store, model);
    if let Some(b) = o.backend {
        c.embedding_backend = b;
        c.llm_backend = b;
    }
    set!(
        embedding_backend,
        llm_backend,
        embedding_dimension,
        segment_length,
        overlap,
        top_k,
        similarity_threshold
    );
    set!(
        summarization_budget,
        classification_budget,
        train_fraction,
        cohort_positive,
        cohort_negative
    );
    set!(decision_threshold, seed, tuning_trials);
    match &cli.command {
        Command::Train { learner: Some(l) } => c.learner = l.clone(),
        Command::Evaluate { seeds: Some(n), .. } => c.seeds = *n,
        _ => {}
    }
    c.validate()?;
    Ok(c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let run = || -> anyhow::Result<()> {
        let config = resolve(&cli)?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs.max(1))
            .build_global()?;
        std::fs::create_dir_all(&cli.out)?;
        std::fs::write(
            cli.out.join(format!("{}.config.toml", cli.command.name())),
            config.to_toml(),
        )?;
        commands::dispatch(&cli.command, &config, &cli.out)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
