//! Resolved run configuration. Values come from command-line flags, then an
//! optional TOML file, then the built-in defaults below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Defaults to `<out>/store`.
    pub store: Option<PathBuf>,
    /// Defaults to `<out>/model.adam`.
    pub model: Option<PathBuf>,
    pub embedding_backend: Backend,
    pub llm_backend: Backend,
    pub embedding_dimension: usize,
    pub segment_length: usize,
    pub overlap: usize,
    pub top_k: usize,
    pub similarity_threshold: f64,
    pub summarization_budget: usize,
    pub classification_budget: usize,
    pub train_fraction: f64,
    pub cohort_positive: usize,
    pub cohort_negative: usize,
    pub decision_threshold: f64,
    pub seed: u64,
    pub seeds: usize,
    pub tuning_trials: usize,
    pub learner: String,
    pub embed_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            schema: None,
            corpus: None,
            store: None,
            model: None,
            embedding_backend: Backend::Mock,
            llm_backend: Backend::Mock,
            embedding_dimension: adam_core::embedding::DEFAULT_DIMENSION,
            segment_length: 2000,
            overlap: 400,
            top_k: 5,
            similarity_threshold: 0.8,
            summarization_budget: 100_000,
            classification_budget: 50_000,
            train_fraction: 0.75,
            cohort_positive: 15,
            cohort_negative: 15,
            decision_threshold: 0.5,
            seed: 0,
            seeds: 10,
            tuning_trials: 20,
            learner: "gbdt".into(),
            embed_batch_size: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            );
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            bail!(
                "similarity_threshold must lie in [-1, 1], got {}",
                self.similarity_threshold
            );
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            bail!(
                "decision_threshold must lie in [0, 1], got {}",
                self.decision_threshold
            );
        }
        if self.overlap >= self.segment_length {
            bail!(
                "overlap {} must be smaller than segment_length {}",
                self.overlap,
                self.segment_length
            );
        }
        if self.top_k == 0 || self.embedding_dimension == 0 || self.embed_batch_size == 0 {
            bail!("top_k, embedding_dimension and embed_batch_size must be positive");
        }
        if self.seeds == 0 {
            bail!("seeds must be positive");
        }
        self.learner
            .parse::<adam_core::ensemble::ModelKind>()
            .map_err(anyhow::Error::msg)?;
        Ok(())
    }

    pub fn store_dir(&self, out: &Path) -> PathBuf {
        self.store.clone().unwrap_or_else(|| out.join("store"))
    }

    pub fn model_path(&self, out: &Path) -> PathBuf {
        self.model.clone().unwrap_or_else(|| out.join("model.adam"))
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        let p = value
            .as_deref()
            .with_context(|| format!("no {what} given (flag or config file)"))?;
        if !p.exists() {
            bail!("{what} {} does not exist", p.display());
        }
        Ok(p)
    }
}
