//! The three-stage agent pipeline: a computational agent that scores one
//! sample, a summarization agent and a classification agent, each driven by
//! an eight-step chain-of-thought program with per-step literature
//! retrieval.
//!
//! Stage order is enforced by the types: [`run_summarization`] consumes an
//! [`AgentContext`] and yields a [`SummarizedContext`], which is the only
//! input [`run_classification`] accepts.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{rank_features, tree_shap_row, AttributionError, ShapAttribution};
use crate::dataset::{Imputer, Label, Sample, SampleSet};
use crate::diversity::{diversity_profile, BetaMetric, DiversityError, DiversityProfile};
use crate::embedding::{embed_text, EmbeddingBackend, EmbeddingError, Gate};
use crate::ensemble::TreeEnsemble;
use crate::stats::{TrialContext, VerdictPipeline};
use crate::vectorstore::{search, CollectionSet, RetrievalHit, StoreError};

pub const LLM_API_KEY_ENV: &str = "ADAM_LLM_API_KEY";
pub const NO_PRIOR_VISITS: &str = "No prior visits";
pub const NO_ATTRIBUTIONS: &str = "No attributions available";
/// Prefix identifying medication columns among clinical features.
pub const MEDICATION_PREFIX: &str = "med_";

pub const SUMMARIZATION_STEPS: [&str; 8] = [
    "Patient Overview",
    "Key Clinical Markers",
    "Gut Microbiome Profile",
    "Diversity Metrics Analysis",
    "Interactions and Mechanisms",
    "Descriptive Correlation",
    "Machine Learning analysis and probabilistic assessment",
    "Final Comprehensive Descriptive Summary",
];

pub const CLASSIFICATION_STEPS: [&str; 8] = [
    "Historical Data Insights",
    "Diversity Metrics & Classification Refinement",
    "Adaptive Threshold Decisioning",
    "Handling Edge Cases & Misclassifications",
    "Comprehensive Summary of this Visit",
    "SHAP Feature Importance",
    "Key Considerations for Prediction and Misclassification Adjustments",
    "Prediction Decision Rules",
];

pub const REPORT_SECTIONS: [&str; 5] = [
    "Clinical Indicators",
    "Medications",
    "Gut Microbiome Profile",
    "Diversity Metrics",
    "SHAP Feature Importance",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotRole {
    Summarization,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CotProgram {
    pub role: CotRole,
    pub steps: &'static [&'static str; 8],
    instructions: &'static [&'static str; 8],
}

impl CotProgram {
    pub const SUMMARIZATION: CotProgram = CotProgram {
        role: CotRole::Summarization,
        steps: &SUMMARIZATION_STEPS,
        instructions: &[
            "Start with basic patient demographics and the visit being described.",
            "Describe the clinical measurements most relevant to cognitive status.",
            "Describe the dominant taxa and notable abundances in this sample.",
            "Interpret alpha diversity and the dissimilarity to the healthy reference cohort.",
            "Relate the microbial and clinical findings to known gut-brain mechanisms in the retrieved literature.",
            "Describe how the leading features move the model output, without asserting causation.",
            "Report the ensemble probability and the features that drive it.",
            "Write one integrated descriptive summary of this visit.",
        ],
    };

    pub const CLASSIFICATION: CotProgram = CotProgram {
        role: CotRole::Classification,
        steps: &CLASSIFICATION_STEPS,
        instructions: &[
            "Compare this visit with the participant's earlier visits, if any.",
            "Use the diversity metrics to refine the model's assessment.",
            "Determine a decision threshold for this case; fall back to the configured threshold when the evidence is balanced.",
            "Consider probabilities near the threshold and conflicting signals carefully.",
            "Summarize the current visit from the summarization agent's output.",
            "Weigh the signed feature attributions listed above.",
            "List the considerations that could cause a misclassification and how they were handled.",
            "State the decision. The first line of the answer must be exactly 'Prediction: Yes' or 'Prediction: No'.",
        ],
    };

    pub fn for_role(role: CotRole) -> Self {
        match role {
            CotRole::Summarization => Self::SUMMARIZATION,
            CotRole::Classification => Self::CLASSIFICATION,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("feature alignment error: {0}")]
    Alignment(String),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Retrieval(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("language model failed during {stage:?} after {completed_steps} retrieval step(s): {source}")]
    Llm {
        stage: CotRole,
        completed_steps: usize,
        transcripts: Vec<StepTranscript>,
        source: LlmError,
    },
    #[error("prompt of {tokens} tokens exceeds the {budget}-token budget after truncation")]
    Budget { tokens: usize, budget: usize },
    #[error("could not parse a verdict from: {raw:?}")]
    VerdictParse { raw: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationalOutput {
    pub sample_id: String,
    pub study_id: String,
    pub visit_index: u32,
    pub probability: f64,
    pub diversity: DiversityProfile<f64>,
    pub attribution: ShapAttribution<f64>,
    pub top_features: Vec<(String, f64)>,
    /// Observed clinical values (medications excluded).
    pub clinical: BTreeMap<String, f64>,
    pub medications: BTreeMap<String, f64>,
    /// Largest relative abundances, descending.
    pub top_taxa: Vec<(String, f64)>,
}

pub const TOP_FEATURES: usize = 10;
const TOP_TAXA: usize = 10;

/// Negative-label samples of a training partition.
pub fn healthy_reference(train: &SampleSet) -> SampleSet {
    train.with_samples(
        train
            .samples
            .iter()
            .filter(|s| s.label == Label::Negative)
            .cloned()
            .collect(),
    )
}

pub fn run_computational(
    sample: &Sample,
    model: &TreeEnsemble<f64>,
    imputer: &Imputer,
    reference: &SampleSet,
) -> Result<ComputationalOutput, AgentError> {
    let row: Vec<f64> = imputer
        .row(sample, &model.feature_order)
        .map_err(|n| AgentError::Alignment(format!("cannot impute {n:?}")))?;
    let attribution = tree_shap_row(model, &row)?;
    let probability = model.predict_row(&row);
    let abundance = reference.abundance_vector(sample);
    let ref_rows: Vec<Vec<f64>> = reference
        .samples
        .iter()
        .map(|r| reference.abundance_vector(r))
        .collect();
    let diversity = diversity_profile(&abundance, &ref_rows)?;
    let total: f64 = abundance.iter().sum();
    let mut top_taxa: Vec<(String, f64)> = reference
        .taxon_order
        .iter()
        .cloned()
        .zip(abundance.iter().map(|a| a / total))
        .filter(|(_, a)| *a > 0.0)
        .collect();
    top_taxa.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top_taxa.truncate(TOP_TAXA);
    let (medications, clinical) = sample
        .clinical
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .partition(|(k, _)| k.starts_with(MEDICATION_PREFIX));
    Ok(ComputationalOutput {
        sample_id: sample.sample_id.clone(),
        study_id: sample.study_id.clone(),
        visit_index: sample.visit_index,
        probability,
        top_features: rank_features(&attribution, TOP_FEATURES),
        diversity,
        attribution,
        clinical,
        medications,
        top_taxa,
    })
}

impl ComputationalOutput {
    fn render(&self, out: &mut String) {
        let _ = writeln!(out, "Sample ID: {}", self.sample_id);
        let _ = writeln!(out, "Study ID: {}", self.study_id);
        let _ = writeln!(out, "Visit index: {}", self.visit_index);
        let _ = writeln!(out, "Ensemble probability: {:?}", self.probability);
        let _ = writeln!(
            out,
            "Ensemble probability (percent): {}",
            percent(self.probability)
        );
        let _ = writeln!(out, "Clinical values:");
        for (k, v) in &self.clinical {
            let _ = writeln!(out, "  {k}: {v}");
        }
        let _ = writeln!(out, "Medications:");
        for (k, v) in &self.medications {
            let _ = writeln!(out, "  {k}: {v}");
        }
        let _ = writeln!(out, "Top taxa by relative abundance:");
        for (k, v) in &self.top_taxa {
            let _ = writeln!(out, "  {k}: {:.4}", v);
        }
        render_diversity(&self.diversity, out);
        let _ = writeln!(
            out,
            "SHAP values (log-odds scale, base value {:+.4}):",
            self.attribution.base_value
        );
        for (k, v) in &self.top_features {
            let _ = writeln!(out, "  {k}: {}", signed(*v));
        }
    }

    fn render_brief(&self, out: &mut String) {
        let _ = write!(
            out,
            "visit {} ({}): probability {}",
            self.visit_index,
            self.sample_id,
            percent(self.probability)
        );
        let _ = write!(out, ", Shannon {:.2}", self.diversity.shannon);
        if let Some((k, v)) = self.top_features.first() {
            let _ = write!(out, ", leading feature {k} {}", signed(*v));
        }
        out.push('\n');
    }
}

fn render_diversity(d: &DiversityProfile<f64>, out: &mut String) {
    let _ = writeln!(out, "Shannon Index: {:.2}", d.shannon);
    let _ = writeln!(out, "Simpson Index: {:.2}", d.simpson);
    let _ = writeln!(out, "Berger-Parker Dominance: {:.2}", d.berger_parker);
    for m in BetaMetric::ALL {
        if let Some(v) = d.beta_to_reference.get(&m) {
            let _ = writeln!(
                out,
                "{} dissimilarity to healthy reference: {:.2}",
                beta_title(m),
                v
            );
        }
    }
}

fn beta_title(m: BetaMetric) -> &'static str {
    match m {
        BetaMetric::BrayCurtis => "Bray-Curtis",
        BetaMetric::Jaccard => "Jaccard",
        BetaMetric::Canberra => "Canberra",
    }
}

/// `"+0.7978"` / `"-0.6193"`.
pub fn signed(v: f64) -> String {
    format!("{v:+.4}")
}

/// `"24.20%"`.
pub fn percent(p: f64) -> String {
    format!("{:.2}%", p * 100.0)
}

/// `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTranscript {
    pub role: CotRole,
    pub step: usize,
    pub title: String,
    pub query: String,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenAccounting {
    pub summarization_prompt: usize,
    pub classification_prompt: usize,
    pub dropped_history: usize,
    pub dropped_hits: usize,
    pub truncated_summary_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub top_k: usize,
    pub similarity_threshold: f64,
    pub summarization_budget: usize,
    pub classification_budget: usize,
    /// Threshold the classification agent falls back to.
    pub fallback_threshold: f64,
    pub excerpt_chars: usize,
    pub max_output_tokens: usize,
    pub temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            similarity_threshold: 0.8,
            summarization_budget: 100_000,
            classification_budget: 50_000,
            fallback_threshold: 0.5,
            excerpt_chars: 500,
            max_output_tokens: 4096,
            temperature: 0.0,
        }
    }
}

/// Per-sample dossier before summarization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentContext {
    pub computational: ComputationalOutput,
    /// Earlier visits of the same participant, oldest first.
    pub history: Vec<ComputationalOutput>,
    pub transcripts: Vec<StepTranscript>,
    pub tokens: TokenAccounting,
}

impl AgentContext {
    /// Drops any history entry that does not strictly precede the current
    /// visit, and orders the rest by visit.
    pub fn new(computational: ComputationalOutput, mut history: Vec<ComputationalOutput>) -> Self {
        history.retain(|h| {
            h.study_id == computational.study_id && h.visit_index < computational.visit_index
        });
        history.sort_by_key(|h| h.visit_index);
        Self {
            computational,
            history,
            transcripts: Vec::new(),
            tokens: TokenAccounting::default(),
        }
    }
}

/// Dossier after summarization; the only input to classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizedContext {
    pub context: AgentContext,
    pub summary: String,
    pub summarization_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("language model backend failed after {attempts} attempt(s): {message}")]
pub struct LlmError {
    pub attempts: usize,
    pub message: String,
}

pub trait LlmBackend: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

/// Deterministic stand-in for both agent roles.
///
/// For a summarization prompt it answers one paragraph per step title found
/// in the prompt, in prompt order. For a classification prompt it answers
/// `Prediction: Yes` exactly when the ensemble probability in the prompt is
/// at least `threshold`.
#[derive(Debug, Clone)]
pub struct MockLlm {
    pub name: String,
    pub threshold: f64,
}

impl MockLlm {
    pub fn new(threshold: f64) -> Self {
        Self {
            name: "mock".into(),
            threshold,
        }
    }
}

fn prompt_field<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .map(str::trim)
}

impl LlmBackend for MockLlm {
    fn model(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let prompt = &request.user;
        let sample = prompt_field(prompt, "Sample ID:").unwrap_or("unknown");
        let p: f64 = prompt_field(prompt, "Ensemble probability:")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| LlmError {
                attempts: 1,
                message: "prompt lacks an ensemble probability".into(),
            })?;
        if prompt.contains(CLASSIFICATION_STEPS[2]) {
            let yes = p >= self.threshold;
            let word = if yes { "Yes" } else { "No" };
            let mut out = format!(
                "Prediction: {word} - The prediction for Sample ID {sample} is '{word}' for Alzheimer's disease (AD) based on a probability of {}.\n",
                percent(p)
            );
            for (i, t) in CLASSIFICATION_STEPS.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{}. {t}: probability {} against threshold {:.2}.",
                    i + 1,
                    percent(p),
                    self.threshold
                );
            }
            Ok(out)
        } else {
            let mut out = String::new();
            for (i, t) in SUMMARIZATION_STEPS.iter().enumerate() {
                if prompt.contains(t) {
                    let _ = writeln!(
                        out,
                        "{}. {t}: sample {sample}, ensemble probability {}.",
                        i + 1,
                        percent(p)
                    );
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteLlmConfig {
    pub endpoint: String,
    pub model: String,
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub backoff_factor: u32,
    pub max_concurrent_requests: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteLlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            max_attempts: 5,
            base_delay_ms: 1000,
            backoff_factor: 2,
            max_concurrent_requests: 4,
            timeout_secs: 300,
        }
    }
}

pub const SUMMARIZATION_MODEL: &str = "gpt-4o";
pub const CLASSIFICATION_MODEL: &str = "gpt-4o-mini";

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    max_tokens: usize,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// Chat-completion client with exponential backoff.
pub struct RemoteLlm {
    config: RemoteLlmConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteLlm {
    pub fn new(config: RemoteLlmConfig, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError {
                attempts: 0,
                message: e.to_string(),
            })?;
        let gate = Gate::new(config.max_concurrent_requests);
        Ok(Self {
            config,
            api_key,
            client,
            gate,
        })
    }

    /// Reads the credential from `ADAM_LLM_API_KEY`.
    pub fn from_env(config: RemoteLlmConfig) -> Result<Self, LlmError> {
        Self::new(config, std::env::var(LLM_API_KEY_ENV).ok())
    }

    fn attempt(&self, request: &LlmRequest) -> Result<String, (bool, String)> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &request.system,
                },
                ChatMessage {
                    role: "user",
                    content: &request.user,
                },
            ],
            max_tokens: request.max_tokens,
            temperature: request.temperature,
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| (false, format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or((false, "no choices in response".into()))
    }
}

impl LlmBackend for RemoteLlm {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let max = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.gate.run(|| self.attempt(request)) {
                Ok(text) => return Ok(text),
                Err((false, message)) => {
                    return Err(LlmError {
                        attempts: attempt,
                        message,
                    })
                }
                Err((true, message)) => {
                    log::warn!("chat request attempt {attempt}/{max} failed: {message}");
                    last = message;
                    if attempt < max {
                        let factor =
                            (self.config.backoff_factor as u64).saturating_pow(attempt as u32 - 1);
                        std::thread::sleep(Duration::from_millis(
                            self.config.base_delay_ms.saturating_mul(factor),
                        ));
                    }
                }
            }
        }
        Err(LlmError {
            attempts: max,
            message: last,
        })
    }
}

/// Collections plus the embedding backend used for queries.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub collections: &'a CollectionSet,
    pub embedder: &'a dyn EmbeddingBackend,
}

impl Retriever<'_> {
    fn retrieve(&self, query: &str, config: &AgentConfig) -> Result<Vec<RetrievalHit>, AgentError> {
        if self.collections.total_records() == 0 {
            return Ok(Vec::new());
        }
        let mut q: String = query
            .chars()
            .take(self.embedder.max_input_chars())
            .collect();
        if q.is_empty() {
            q.push(' ');
        }
        let v = embed_text(self.embedder, &q)?;
        Ok(search(
            self.collections,
            &v,
            config.top_k.max(1),
            config.similarity_threshold,
        )?)
    }
}

fn excerpt(text: &str, max: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    flat.chars().take(max).collect()
}

fn join_pairs(v: &[(String, f64)], fmt: impl Fn(f64) -> String) -> String {
    v.iter()
        .map(|(k, x)| format!("{k} {}", fmt(*x)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn join_map(m: &BTreeMap<String, f64>) -> String {
    m.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn summarization_excerpt(step: usize, c: &ComputationalOutput) -> String {
    let d = &c.diversity;
    match step {
        0 => format!(
            "sample {} participant {} visit {}; {}",
            c.sample_id,
            c.study_id,
            c.visit_index,
            join_map(&c.clinical)
        ),
        1 => join_map(&c.clinical),
        2 => join_pairs(&c.top_taxa, |x| format!("{x:.4}")),
        3 => format!(
            "Shannon {:.2}, Simpson {:.2}, Berger-Parker {:.2}",
            d.shannon, d.simpson, d.berger_parker
        ),
        4 => c
            .top_features
            .iter()
            .map(|(k, _)| k.as_str())
            .collect::<Vec<_>>()
            .join(", "),
        5 => join_pairs(&c.top_features, signed),
        6 => format!("ensemble probability {}", percent(c.probability)),
        _ => format!(
            "probability {}; {}",
            percent(c.probability),
            join_pairs(&c.top_features, signed)
        ),
    }
}

fn classification_excerpt(step: usize, s: &SummarizedContext, config: &AgentConfig) -> String {
    let c = &s.context.computational;
    match step {
        0 => {
            if s.context.history.is_empty() {
                NO_PRIOR_VISITS.to_string()
            } else {
                let mut o = String::new();
                s.context
                    .history
                    .iter()
                    .for_each(|h| h.render_brief(&mut o));
                o
            }
        }
        1 => format!(
            "Shannon {:.2}, Simpson {:.2}, probability {}",
            c.diversity.shannon,
            c.diversity.simpson,
            percent(c.probability)
        ),
        2 => format!(
            "probability {} with fallback threshold {:.2}",
            percent(c.probability),
            config.fallback_threshold
        ),
        3 => format!(
            "distance from threshold {:.4}",
            (c.probability - config.fallback_threshold).abs()
        ),
        4 => s.summary.clone(),
        5 => join_pairs(&c.top_features, signed),
        6 => join_map(&c.medications),
        _ => format!("probability {}", percent(c.probability)),
    }
}

/// Builds one query per step and retrieves its hits.
fn retrieve_steps(
    program: CotProgram,
    excerpts: impl Fn(usize) -> String,
    retriever: &Retriever<'_>,
    config: &AgentConfig,
    done: &mut Vec<StepTranscript>,
) -> Result<(), AgentError> {
    for (i, title) in program.steps.iter().enumerate() {
        let query = format!("{title}: {}", excerpt(&excerpts(i), config.excerpt_chars));
        let hits = retriever.retrieve(&query, config)?;
        done.push(StepTranscript {
            role: program.role,
            step: i + 1,
            title: title.to_string(),
            query,
            hits,
        });
    }
    Ok(())
}

/// Pieces of a prompt in their fixed order. Only history, hits and the
/// summary text may be removed to meet a budget.
struct PromptParts<'a> {
    program: CotProgram,
    computational: &'a ComputationalOutput,
    history: Vec<&'a ComputationalOutput>,
    summary: Option<String>,
    /// Per step, hits kept in descending similarity order.
    hits: Vec<Vec<&'a RetrievalHit>>,
    fallback_threshold: f64,
}

impl PromptParts<'_> {
    fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("## Computational agent output\n");
        self.computational.render(&mut out);
        out.push_str("\n## Visit history\n");
        if self.history.is_empty() {
            let _ = writeln!(out, "{NO_PRIOR_VISITS}");
        } else {
            for h in &self.history {
                h.render_brief(&mut out);
            }
        }
        if let Some(s) = &self.summary {
            out.push_str("\n## Summarization agent output\n");
            out.push_str(s);
            if !s.ends_with('\n') {
                out.push('\n');
            }
        }
        out.push_str("\n## Retrieved literature\n");
        for (i, hits) in self.hits.iter().enumerate() {
            let _ = writeln!(out, "### Step {}: {}", i + 1, self.program.steps[i]);
            if hits.is_empty() {
                out.push_str("(no passages above the similarity threshold)\n");
            }
            for h in hits {
                let _ = writeln!(
                    out,
                    "- [{} {}#{} similarity {:.4}] {}",
                    h.collection,
                    h.publication_id,
                    h.segment_index,
                    h.similarity,
                    h.text.split_whitespace().collect::<Vec<_>>().join(" ")
                );
            }
        }
        out.push_str("\n## Reasoning steps\n");
        for (i, (t, ins)) in self
            .program
            .steps
            .iter()
            .zip(self.program.instructions)
            .enumerate()
        {
            let _ = writeln!(out, "Step {}: {t}", i + 1);
            let _ = writeln!(out, "    {ins}");
        }
        if self.program.role == CotRole::Classification {
            let _ = writeln!(
                out,
                "\nConfigured fallback threshold: {:.2}",
                self.fallback_threshold
            );
        }
        out
    }

    /// Removes content until the estimate fits: oldest history first, then
    /// the lowest-similarity hit, then the tail of the summary.
    fn fit(&mut self, budget: usize, tokens: &mut TokenAccounting) -> Result<String, AgentError> {
        loop {
            let text = self.render();
            let est = estimate_tokens(&text);
            if est <= budget {
                return Ok(text);
            }
            if !self.history.is_empty() {
                self.history.remove(0);
                tokens.dropped_history += 1;
                continue;
            }
            let weakest = self
                .hits
                .iter()
                .enumerate()
                .filter_map(|(s, v)| v.last().map(|h| (s, h.similarity)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((s, _)) = weakest {
                self.hits[s].pop();
                tokens.dropped_hits += 1;
                continue;
            }
            if let Some(s) = &mut self.summary {
                let len = s.chars().count();
                if len > 0 {
                    let excess = (est - budget) * 4;
                    let keep = len.saturating_sub(excess.max(1));
                    *s = s.chars().take(keep).collect();
                    tokens.truncated_summary_chars += len - keep;
                    continue;
                }
            }
            return Err(AgentError::Budget {
                tokens: est,
                budget,
            });
        }
    }
}

const SUMMARIZATION_SYSTEM: &str = "You are a clinical summarization agent. Follow the numbered reasoning steps in order, using the computational output, the visit history and the retrieved literature. Write one section per step under the step's title.";
const CLASSIFICATION_SYSTEM: &str = "You are a classification agent for Alzheimer's disease. Follow the numbered reasoning steps in order. The first line of your answer must be 'Prediction: Yes' or 'Prediction: No'.";

fn hits_of(t: &[StepTranscript], role: CotRole) -> Vec<Vec<&RetrievalHit>> {
    t.iter()
        .filter(|s| s.role == role)
        .map(|s| s.hits.iter().collect())
        .collect()
}

pub fn build_summarization_prompt(
    ctx: &mut AgentContext,
    retriever: &Retriever<'_>,
    config: &AgentConfig,
) -> Result<String, AgentError> {
    let program = CotProgram::SUMMARIZATION;
    let mut transcripts = Vec::new();
    retrieve_steps(
        program,
        |i| summarization_excerpt(i, &ctx.computational),
        retriever,
        config,
        &mut transcripts,
    )?;
    let mut tokens = ctx.tokens;
    let prompt = {
        let mut parts = PromptParts {
            program,
            computational: &ctx.computational,
            history: ctx.history.iter().collect(),
            summary: None,
            hits: hits_of(&transcripts, CotRole::Summarization),
            fallback_threshold: config.fallback_threshold,
        };
        parts.fit(config.summarization_budget, &mut tokens)?
    };
    tokens.summarization_prompt = estimate_tokens(&prompt);
    ctx.tokens = tokens;
    ctx.transcripts.extend(transcripts);
    Ok(prompt)
}

pub fn run_summarization(
    mut ctx: AgentContext,
    retriever: &Retriever<'_>,
    llm: &dyn LlmBackend,
    config: &AgentConfig,
) -> Result<SummarizedContext, AgentError> {
    let prompt = build_summarization_prompt(&mut ctx, retriever, config)?;
    let request = LlmRequest {
        model: llm.model().to_string(),
        system: SUMMARIZATION_SYSTEM.into(),
        user: prompt.clone(),
        max_tokens: config.max_output_tokens,
        temperature: config.temperature,
    };
    let summary = llm.complete(&request).map_err(|source| AgentError::Llm {
        stage: CotRole::Summarization,
        completed_steps: ctx.transcripts.len(),
        transcripts: ctx.transcripts.clone(),
        source,
    })?;
    Ok(SummarizedContext {
        context: ctx,
        summary,
        summarization_prompt: prompt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    pub fn is_positive(self) -> bool {
        self == Verdict::Yes
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Yes => "Yes",
            Verdict::No => "No",
        })
    }
}

/// Reads the verdict from a first line of the form `Prediction: Yes` or
/// `Prediction: No`, optionally followed by punctuation and more text.
pub fn parse_verdict(text: &str) -> Result<Verdict, AgentError> {
    let err = || AgentError::VerdictParse {
        raw: text.to_string(),
    };
    let first = text.lines().next().ok_or_else(err)?.trim();
    let rest = first.strip_prefix("Prediction: ").ok_or_else(err)?;
    let (verdict, tail) = if let Some(t) = rest.strip_prefix("Yes") {
        (Verdict::Yes, t)
    } else if let Some(t) = rest.strip_prefix("No") {
        (Verdict::No, t)
    } else {
        return Err(err());
    };
    match tail.chars().next() {
        Some(c) if c.is_alphanumeric() => Err(err()),
        _ => Ok(verdict),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub title: String,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub sample_id: String,
    pub verdict: Verdict,
    pub probability: f64,
    /// Numbered rationale, in [`REPORT_SECTIONS`] order.
    pub sections: Vec<ReportSection>,
    pub summary: String,
    pub response: String,
    pub transcripts: Vec<StepTranscript>,
    pub tokens: TokenAccounting,
}

fn report_sections(c: &ComputationalOutput) -> Vec<ReportSection> {
    let lines = |m: &BTreeMap<String, f64>| {
        m.iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect::<Vec<_>>()
    };
    let mut diversity = String::new();
    render_diversity(&c.diversity, &mut diversity);
    let shap: Vec<String> = if c.top_features.is_empty() {
        vec![NO_ATTRIBUTIONS.to_string()]
    } else {
        c.top_features
            .iter()
            .map(|(k, v)| format!("{k} (SHAP: {})", signed(*v)))
            .collect()
    };
    let bodies = [
        lines(&c.clinical),
        lines(&c.medications),
        c.top_taxa
            .iter()
            .map(|(k, v)| format!("{k}: {} relative abundance", percent(*v)))
            .collect(),
        diversity.lines().map(str::to_string).collect(),
        shap,
    ];
    REPORT_SECTIONS
        .iter()
        .zip(bodies)
        .map(|(t, lines)| ReportSection {
            title: t.to_string(),
            lines,
        })
        .collect()
}

pub fn build_classification_prompt(
    ctx: &mut SummarizedContext,
    retriever: &Retriever<'_>,
    config: &AgentConfig,
) -> Result<String, AgentError> {
    let program = CotProgram::CLASSIFICATION;
    let mut transcripts = Vec::new();
    retrieve_steps(
        program,
        |i| classification_excerpt(i, ctx, config),
        retriever,
        config,
        &mut transcripts,
    )?;
    let mut tokens = ctx.context.tokens;
    let prompt = {
        let mut parts = PromptParts {
            program,
            computational: &ctx.context.computational,
            history: ctx.context.history.iter().collect(),
            summary: Some(ctx.summary.clone()),
            hits: hits_of(&transcripts, CotRole::Classification),
            fallback_threshold: config.fallback_threshold,
        };
        parts.fit(config.classification_budget, &mut tokens)?
    };
    tokens.classification_prompt = estimate_tokens(&prompt);
    ctx.context.tokens = tokens;
    ctx.context.transcripts.extend(transcripts);
    Ok(prompt)
}

pub fn run_classification(
    mut ctx: SummarizedContext,
    retriever: &Retriever<'_>,
    llm: &dyn LlmBackend,
    config: &AgentConfig,
) -> Result<ClassificationReport, AgentError> {
    let prompt = build_classification_prompt(&mut ctx, retriever, config)?;
    let request = LlmRequest {
        model: llm.model().to_string(),
        system: CLASSIFICATION_SYSTEM.into(),
        user: prompt,
        max_tokens: config.max_output_tokens,
        temperature: config.temperature,
    };
    let response = llm.complete(&request).map_err(|source| AgentError::Llm {
        stage: CotRole::Classification,
        completed_steps: ctx.context.transcripts.len(),
        transcripts: ctx.context.transcripts.clone(),
        source,
    })?;
    let verdict = parse_verdict(&response)?;
    let c = &ctx.context.computational;
    Ok(ClassificationReport {
        sample_id: c.sample_id.clone(),
        verdict,
        probability: c.probability,
        sections: report_sections(c),
        summary: ctx.summary.clone(),
        response,
        transcripts: ctx.context.transcripts.clone(),
        tokens: ctx.context.tokens,
    })
}

pub fn headline(report: &ClassificationReport) -> String {
    format!(
        "Prediction: {v} - The prediction for Sample ID {id} is '{v}' for Alzheimer's disease (AD) based on a probability of {p}.",
        v = report.verdict,
        id = report.sample_id,
        p = percent(report.probability)
    )
}

pub fn render_report(report: &ClassificationReport) -> String {
    let mut out = headline(report);
    out.push_str("\n\n");
    for (i, s) in report.sections.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, s.title);
        if s.lines.is_empty() {
            out.push_str("- None recorded\n");
        }
        for l in &s.lines {
            let _ = writeln!(out, "- {l}");
        }
        out.push('\n');
    }
    out.push_str("## Summary\n\n");
    out.push_str(report.summary.trim_end());
    out.push_str("\n\n## Classification agent response\n\n");
    out.push_str(report.response.trim_end());
    out.push_str("\n\n## Retrieval by reasoning step\n\n");
    for t in &report.transcripts {
        let role = match t.role {
            CotRole::Summarization => "summarization",
            CotRole::Classification => "classification",
        };
        let _ = writeln!(
            out,
            "- {role} step {} ({}): {} passage(s)",
            t.step,
            t.title,
            t.hits.len()
        );
        for h in &t.hits {
            let _ = writeln!(
                out,
                "  - {} {}#{} ({:.4})",
                h.collection, h.publication_id, h.segment_index, h.similarity
            );
        }
    }
    out
}

/// Services shared by every sample of a run.
#[derive(Clone, Copy)]
pub struct AgentServices<'a> {
    pub retriever: Retriever<'a>,
    pub summarizer: &'a dyn LlmBackend,
    pub classifier: &'a dyn LlmBackend,
    pub config: &'a AgentConfig,
}

/// Earlier visits of `sample`'s participant found in `dataset`.
pub fn prior_visits<'a>(sample: &Sample, dataset: &'a SampleSet) -> Vec<&'a Sample> {
    let mut v: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.study_id == sample.study_id && s.visit_index < sample.visit_index)
        .collect();
    v.sort_by_key(|s| s.visit_index);
    v
}

/// Runs all three stages for one sample.
pub fn classify_sample(
    sample: &Sample,
    dataset: &SampleSet,
    model: &TreeEnsemble<f64>,
    imputer: &Imputer,
    reference: &SampleSet,
    services: &AgentServices<'_>,
) -> Result<ClassificationReport, AgentError> {
    let computational = run_computational(sample, model, imputer, reference)?;
    let history = prior_visits(sample, dataset)
        .into_iter()
        .map(|s| run_computational(s, model, imputer, reference))
        .collect::<Result<Vec<_>, _>>()?;
    let ctx = AgentContext::new(computational, history);
    let summarized = run_summarization(
        ctx,
        &services.retriever,
        services.summarizer,
        services.config,
    )?;
    run_classification(
        summarized,
        &services.retriever,
        services.classifier,
        services.config,
    )
}

/// The agent pipeline as a source of trial verdicts.
pub struct AdamPipeline<'a> {
    pub services: AgentServices<'a>,
}

impl VerdictPipeline for AdamPipeline<'_> {
    fn verdicts(&self, ctx: &TrialContext<'_>) -> Result<Vec<bool>, String> {
        let reference = healthy_reference(ctx.train);
        ctx.cohort
            .samples
            .par_iter()
            .map(|s| {
                classify_sample(
                    s,
                    ctx.dataset,
                    ctx.model,
                    ctx.imputer,
                    &reference,
                    &self.services,
                )
                .map(|r| r.verdict.is_positive())
                .map_err(|e| format!("sample {}: {e}", s.sample_id))
            })
            .collect()
    }
}
