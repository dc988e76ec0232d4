//! Seeded synthetic cohorts shaped like a nursing-home stool-sample study:
//! participants with one to three visits, clinical covariates with
//! medication flags, and relative abundances over named taxa.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::chunker::CorpusRecord;
use crate::dataset::{DatasetError, Label, Sample, SampleSet};
use crate::rng;

pub const TAXA: [&str; 60] = [
    "Akkermansia muciniphila",
    "Alistipes finegoldii",
    "Alistipes onderdonkii",
    "Alistipes putredinis",
    "Alistipes shahii",
    "Anaerostipes hadrus",
    "Bacteroides caccae",
    "Bacteroides cellulosilyticus",
    "Bacteroides fragilis",
    "Bacteroides ovatus",
    "Bacteroides stercoris",
    "Bacteroides thetaiotaomicron",
    "Bacteroides uniformis",
    "Bacteroides vulgatus",
    "Barnesiella intestinihominis",
    "Bifidobacterium adolescentis",
    "Bifidobacterium longum",
    "Bilophila wadsworthia",
    "Blautia obeum",
    "Blautia wexlerae",
    "Butyricicoccus pullicaecorum",
    "Butyrivibrio crossotus",
    "Clostridium bolteae",
    "Clostridium leptum",
    "Collinsella aerofaciens",
    "Coprococcus catus",
    "Coprococcus comes",
    "Coprococcus eutactus",
    "Dialister invisus",
    "Dorea formicigenerans",
    "Dorea longicatena",
    "Eggerthella lenta",
    "Enterococcus faecalis",
    "Escherichia coli",
    "Eubacterium eligens",
    "Eubacterium hallii",
    "Eubacterium rectale",
    "Eubacterium siraeum",
    "Faecalibacterium prausnitzii",
    "Flavonifractor plautii",
    "Fusicatenibacter saccharivorans",
    "Gemmiger formicilis",
    "Klebsiella pneumoniae",
    "Lachnospira pectinoschiza",
    "Lactobacillus ruminis",
    "Methanobrevibacter smithii",
    "Neglecta timonensis",
    "Odoribacter splanchnicus",
    "Oscillibacter sp",
    "Parabacteroides distasonis",
    "Parabacteroides merdae",
    "Prevotella copri",
    "Roseburia hominis",
    "Roseburia intestinalis",
    "Ruminococcus bromii",
    "Ruminococcus gnavus",
    "Ruminococcus torques",
    "Streptococcus salivarius",
    "Subdoligranulum sp",
    "Veillonella parvula",
];

/// Taxa whose expected abundance rises with AD status.
const ENRICHED: [&str; 6] = [
    "Alistipes putredinis",
    "Bacteroides fragilis",
    "Bilophila wadsworthia",
    "Escherichia coli",
    "Neglecta timonensis",
    "Ruminococcus gnavus",
];

/// Taxa whose expected abundance falls with AD status.
const DEPLETED: [&str; 6] = [
    "Butyricicoccus pullicaecorum",
    "Coprococcus catus",
    "Eubacterium rectale",
    "Faecalibacterium prausnitzii",
    "Roseburia intestinalis",
    "Bifidobacterium adolescentis",
];

pub const CLINICAL: [&str; 14] = [
    "age",
    "bmi",
    "depression",
    "diabetes",
    "frailty_score",
    "hypertension",
    "malnutrition_score",
    "med_antibiotic",
    "med_donepezil",
    "med_memantine",
    "med_ppi",
    "med_ssri",
    "med_statin",
    "sex_female",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_positive: usize,
    pub max_visits: u32,
    /// Scale of the class difference in clinical and taxon effects.
    pub signal: f64,
    /// Chance that any one clinical cell is left missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 335,
            n_positive: 110,
            max_visits: 3,
            signal: 1.0,
            missing_rate: 0.03,
            seed: 42,
        }
    }
}

fn bernoulli(r: &mut rng::Rng, p: f64) -> f64 {
    if r.random::<f64>() < p.clamp(0.0, 1.0) {
        1.0
    } else {
        0.0
    }
}

/// Visit counts summing exactly to `total`.
fn visit_plan(r: &mut rng::Rng, total: usize, max_visits: u32) -> Vec<u32> {
    let mut plan = Vec::new();
    let mut left = total;
    while left > 0 {
        let v = (r.random_range(1..=max_visits.max(1)) as usize).min(left);
        plan.push(v as u32);
        left -= v;
    }
    plan
}

struct Participant {
    clinical: BTreeMap<String, f64>,
    log_profile: Vec<f64>,
}

fn participant(r: &mut rng::Rng, positive: bool, signal: f64) -> Participant {
    let s = if positive { signal } else { 0.0 };
    let normal =
        |r: &mut rng::Rng, mu: f64, sd: f64| Normal::new(mu, sd).expect("finite sd").sample(r);
    let mut c = BTreeMap::new();
    c.insert(
        "age".to_string(),
        normal(r, 83.0 + 3.0 * s, 7.0).round().clamp(60.0, 104.0),
    );
    c.insert("sex_female".to_string(), bernoulli(r, 0.65));
    c.insert(
        "bmi".to_string(),
        (normal(r, 26.0 - 1.5 * s, 4.5) * 10.0).round() / 10.0,
    );
    c.insert(
        "frailty_score".to_string(),
        normal(r, 0.30 + 0.08 * s, 0.10).clamp(0.0, 1.0),
    );
    c.insert(
        "malnutrition_score".to_string(),
        normal(r, 24.0 - 2.5 * s, 3.0).round().clamp(0.0, 30.0),
    );
    c.insert("diabetes".to_string(), bernoulli(r, 0.28));
    c.insert("hypertension".to_string(), bernoulli(r, 0.60));
    c.insert("depression".to_string(), bernoulli(r, 0.25 + 0.10 * s));
    c.insert("med_donepezil".to_string(), bernoulli(r, 0.05 + 0.40 * s));
    c.insert("med_memantine".to_string(), bernoulli(r, 0.03 + 0.25 * s));
    c.insert("med_ssri".to_string(), bernoulli(r, 0.20 + 0.05 * s));
    c.insert("med_ppi".to_string(), bernoulli(r, 0.35));
    c.insert("med_statin".to_string(), bernoulli(r, 0.40));
    c.insert("med_antibiotic".to_string(), bernoulli(r, 0.08));
    let log_profile = TAXA
        .iter()
        .enumerate()
        .map(|(i, t)| {
            // Decaying baseline so a few taxa dominate, as in stool profiles.
            let base = -0.08 * i as f64 + normal(r, 0.0, 0.9);
            let shift = if ENRICHED.contains(t) {
                0.6 * s
            } else if DEPLETED.contains(t) {
                -0.6 * s
            } else {
                0.0
            };
            base + shift
        })
        .collect();
    Participant {
        clinical: c,
        log_profile,
    }
}

fn visit(
    r: &mut rng::Rng,
    p: &Participant,
    missing_rate: f64,
) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let jitter = Normal::new(0.0, 0.35).expect("finite sd");
    let mut weights: Vec<f64> = p
        .log_profile
        .iter()
        .map(|lp| {
            let shape = (lp + jitter.sample(r)).exp().max(1e-3);
            Gamma::new(shape, 1.0).expect("positive shape").sample(r)
        })
        .collect();
    // Undetected taxa.
    for w in weights.iter_mut() {
        if r.random::<f64>() < 0.15 {
            *w = 0.0;
        }
    }
    let total: f64 = weights.iter().sum();
    let abundance = TAXA
        .iter()
        .zip(&weights)
        .map(|(t, w)| (t.to_string(), w / total))
        .filter(|(_, a)| *a > 1e-9)
        .collect();
    let mut clinical = p.clinical.clone();
    if let Some(f) = clinical.get_mut("frailty_score") {
        *f = (*f + 0.02 * jitter.sample(r)).clamp(0.0, 1.0);
    }
    clinical.retain(|_, _| r.random::<f64>() >= missing_rate);
    (clinical, abundance)
}

/// A cohort with exactly `n_positive` AD samples among `n_samples`, each
/// participant keeping one label across all visits.
pub fn generate(config: &SyntheticConfig) -> Result<SampleSet, DatasetError> {
    if config.n_positive > config.n_samples {
        return Err(DatasetError::Schema(format!(
            "{} positives requested among {} samples",
            config.n_positive, config.n_samples
        )));
    }
    let mut r = rng::seeded(config.seed);
    let mut groups: Vec<(bool, u32)> = Vec::new();
    for (positive, total) in [
        (true, config.n_positive),
        (false, config.n_samples - config.n_positive),
    ] {
        groups.extend(
            visit_plan(&mut r, total, config.max_visits)
                .into_iter()
                .map(|v| (positive, v)),
        );
    }
    // Interleave participants so ids do not reveal the label.
    for i in (1..groups.len()).rev() {
        let j = r.random_range(0..=i);
        groups.swap(i, j);
    }
    let mut samples = Vec::with_capacity(config.n_samples);
    for (pid, (positive, visits)) in groups.into_iter().enumerate() {
        let p = participant(&mut r, positive, config.signal);
        for v in 0..visits {
            let (clinical, abundance) = visit(&mut r, &p, config.missing_rate);
            samples.push(Sample {
                sample_id: format!("S{:04}", samples.len() + 1),
                study_id: format!("P{:03}", pid + 1),
                visit_index: v,
                clinical,
                abundance,
                label: Label::from_bool(positive),
            });
        }
    }
    SampleSet::new(
        samples,
        CLINICAL.iter().map(|s| s.to_string()),
        TAXA.iter().map(|s| s.to_string()),
    )
}

/// Participants whose label is `x0 + x1 > 1`, kept at least `margin` away
/// from the boundary so every visit of a participant is separable. Three
/// uninformative taxa are included so diversity metrics are defined.
pub fn separable_set(n_participants: usize, visits: u32, margin: f64, seed: u64) -> SampleSet {
    let mut r = rng::seeded(seed);
    let mut samples = Vec::new();
    for pid in 0..n_participants {
        let (x0, x1) = loop {
            let (a, b): (f64, f64) = (r.random(), r.random());
            if (a + b - 1.0).abs() >= margin {
                break (a, b);
            }
        };
        for v in 0..visits.max(1) {
            let j = margin * 0.25;
            let clinical = BTreeMap::from([
                ("x0".to_string(), x0 + j * (r.random::<f64>() - 0.5)),
                ("x1".to_string(), x1 + j * (r.random::<f64>() - 0.5)),
            ]);
            let abundance = (0..3)
                .map(|t| (format!("taxon_{t}"), r.random::<f64>() + 0.01))
                .collect();
            samples.push(Sample {
                sample_id: format!("s{pid}_{v}"),
                study_id: format!("g{pid}"),
                visit_index: v,
                clinical,
                abundance,
                label: Label::from_bool(x0 + x1 > 1.0),
            });
        }
    }
    SampleSet::new(
        samples,
        ["x0".to_string(), "x1".to_string()],
        (0..3).map(|t| format!("taxon_{t}")),
    )
    .expect("generated keys are declared")
}

const SENTENCES: [&str; 12] = [
    "Short-chain fatty acids produced by butyrate-producing taxa such as Faecalibacterium prausnitzii support intestinal barrier integrity.",
    "Reduced gut microbial diversity has been reported in older adults with cognitive decline and frailty.",
    "Amyloid-beta deposition and tau pathology remain the defining neuropathological features of Alzheimer's disease.",
    "Lipopolysaccharide from Gram-negative bacteria can promote systemic inflammation and microglial activation.",
    "Cholinesterase inhibitors such as donepezil are prescribed for mild to moderate Alzheimer's dementia.",
    "Proton pump inhibitors and antibiotics alter the composition of the gut microbiome in long-term care residents.",
    "Enrichment of Bacteroides and depletion of Eubacterium rectale were observed in several dementia cohorts.",
    "The vagus nerve provides a direct communication route along the microbiota-gut-brain axis.",
    "Malnutrition and low body mass index are associated with faster cognitive decline in nursing home residents.",
    "Bray-Curtis dissimilarity summarizes compositional differences between microbial communities.",
    "Tryptophan metabolism by gut bacteria influences serotonin availability and neuroinflammation.",
    "Longitudinal sampling of the same participant reveals substantial within-person variation in taxon abundance.",
];

const TOPICS: [&[&str]; 4] = [
    &["gut microbiome", "short-chain fatty acids"],
    &["amyloid", "tau"],
    &["microbiota-gut-brain axis", "inflammation"],
    &["dementia", "nursing home"],
];

/// A small literature corpus of `n_docs` records with lengths spread
/// between a few hundred and several thousand characters.
pub fn synthetic_corpus(n_docs: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut r = rng::seeded(rng::derive_seed(seed, 7));
    (0..n_docs)
        .map(|d| {
            let target = r.random_range(400..6000);
            let mut text = String::new();
            while text.chars().count() < target {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(SENTENCES[r.random_range(0..SENTENCES.len())]);
            }
            let topic = TOPICS[d % TOPICS.len()];
            CorpusRecord {
                publication_id: format!("PMID{:06}", 100_000 + d),
                title: format!("Synthetic publication {}", d + 1),
                text,
                keywords: topic.iter().map(|k| k.to_string()).collect(),
                keyword_weights: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_samples_from_reader, study_labels, write_samples};
    use std::collections::BTreeSet;

    #[test]
    fn default_cohort_shape() {
        let set = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(set.len(), 335);
        assert_eq!(set.count_label(Label::Positive), 110);
        assert!((110.0f64 / 335.0 - 0.3284).abs() < 5e-5);
        assert!(set.study_ids().len() < 335);
        for s in &set.samples {
            let sum: f64 = s.abundance.values().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(s.abundance.values().all(|v| *v > 0.0));
        }
        // One label per participant.
        let labels = study_labels(&set);
        assert!(set
            .samples
            .iter()
            .all(|s| labels[s.study_id.as_str()] == s.label));
    }

    #[test]
    fn visits_are_consecutive_per_participant() {
        let set = generate(&SyntheticConfig::default()).unwrap();
        let mut per: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
        for s in &set.samples {
            per.entry(&s.study_id).or_default().push(s.visit_index);
        }
        assert!(per
            .values()
            .all(|v| *v == (0..v.len() as u32).collect::<Vec<_>>()));
        assert!(per.values().any(|v| v.len() > 1));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticConfig {
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn written_file_parses_back() {
        let set = generate(&SyntheticConfig::default()).unwrap();
        let (text, schema) = write_samples(&set, b',');
        let parsed = parse_samples_from_reader(text.as_bytes(), &schema).unwrap();
        assert!(parsed.rejected.is_empty());
        assert_eq!(parsed.set.count_label(Label::Positive), 110);
        assert_eq!(parsed.set.len(), 335);
    }

    #[test]
    fn medication_columns_are_flags() {
        let set = generate(&SyntheticConfig::default()).unwrap();
        let meds: BTreeSet<&str> = CLINICAL
            .iter()
            .copied()
            .filter(|c| c.starts_with("med_"))
            .collect();
        assert_eq!(meds.len(), 6);
        for s in &set.samples {
            for m in &meds {
                if let Some(v) = s.clinical.get(*m) {
                    assert!(*v == 0.0 || *v == 1.0);
                }
            }
        }
    }

    #[test]
    fn too_many_positives_is_rejected() {
        assert!(generate(&SyntheticConfig {
            n_samples: 5,
            n_positive: 6,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn corpus_is_seeded_and_routed_both_ways() {
        let a = synthetic_corpus(8, 1);
        assert_eq!(a, synthetic_corpus(8, 1));
        assert_eq!(a.len(), 8);
        let routing = crate::vectorstore::Routing::default();
        let names: BTreeSet<&str> = a.iter().map(|d| routing.route(&d.keywords)).collect();
        assert_eq!(names.len(), 2);
    }

    #[test]
    fn separable_labels_follow_rule() {
        let set = separable_set(40, 2, 0.1, 1);
        assert_eq!(set.len(), 80);
        for s in &set.samples {
            let sum = s.clinical["x0"] + s.clinical["x1"];
            assert_eq!(s.label.is_positive(), sum > 1.0);
        }
    }
}
