//! Alpha diversity and beta dissimilarity of abundance profiles.
//!
//! Alpha metrics are computed on proportions `p_i = x_i / sum(x)`:
//! Shannon entropy in nats, Gini-Simpson `1 - sum(p^2)` and Berger-Parker
//! dominance `max(p)`. Beta metrics compare two profiles that share one
//! taxon order: Bray-Curtis, presence/absence Jaccard and Canberra.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Sample, SampleSet};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiversityError {
    #[error("degenerate community: abundance vector has no positive entry")]
    DegenerateCommunity,
    #[error("abundance entry {index} is negative or not finite")]
    InvalidAbundance { index: usize },
    #[error("taxon alignment mismatch: {left} vs {right} entries")]
    Alignment { left: usize, right: usize },
    #[error("reference set is empty")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMetric {
    Shannon,
    Simpson,
    BergerParker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMetric {
    BrayCurtis,
    Jaccard,
    Canberra,
}

impl BetaMetric {
    pub const ALL: [BetaMetric; 3] = [
        BetaMetric::BrayCurtis,
        BetaMetric::Jaccard,
        BetaMetric::Canberra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BetaMetric::BrayCurtis => "bray_curtis",
            BetaMetric::Jaccard => "jaccard",
            BetaMetric::Canberra => "canberra",
        }
    }
}

impl fmt::Display for BetaMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The six diversity quantities surfaced for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityProfile<F> {
    pub shannon: F,
    pub simpson: F,
    pub berger_parker: F,
    pub beta_to_reference: BTreeMap<BetaMetric, F>,
}

fn validate<F: Scalar>(x: &[F]) -> Result<F, DiversityError> {
    let mut total = F::zero();
    let mut any_positive = false;
    for (index, &v) in x.iter().enumerate() {
        if !v.is_finite() || v < F::zero() {
            return Err(DiversityError::InvalidAbundance { index });
        }
        if v > F::zero() {
            any_positive = true;
        }
        total = total + v;
    }
    if !any_positive {
        return Err(DiversityError::DegenerateCommunity);
    }
    Ok(total)
}

pub fn alpha_diversity<F: Scalar>(
    abundance: &[F],
    metric: AlphaMetric,
) -> Result<F, DiversityError> {
    let total = validate(abundance)?;
    let props = abundance.iter().map(|&v| v / total);
    let value = match metric {
        AlphaMetric::Shannon => {
            let h: F = props.filter(|&p| p > F::zero()).map(|p| -p * p.ln()).sum();
            // -0.0 for a single taxon
            h.max(F::zero())
        }
        AlphaMetric::Simpson => {
            let sum_sq: F = props.map(|p| p * p).sum();
            (F::one() - sum_sq).max(F::zero())
        }
        AlphaMetric::BergerParker => props.fold(F::zero(), F::max),
    };
    Ok(value)
}

pub fn beta_dissimilarity<F: Scalar>(
    x: &[F],
    y: &[F],
    metric: BetaMetric,
) -> Result<F, DiversityError> {
    if x.len() != y.len() {
        return Err(DiversityError::Alignment {
            left: x.len(),
            right: y.len(),
        });
    }
    validate(x)?;
    validate(y)?;
    let value = match metric {
        BetaMetric::BrayCurtis => {
            let (num, den) = x
                .iter()
                .zip(y)
                .fold((F::zero(), F::zero()), |(n, d), (&a, &b)| {
                    (n + (a - b).abs(), d + (a + b))
                });
            num / den
        }
        BetaMetric::Jaccard => {
            let (mut shared, mut union) = (0usize, 0usize);
            for (&a, &b) in x.iter().zip(y) {
                let (pa, pb) = (a > F::zero(), b > F::zero());
                if pa && pb {
                    shared += 1;
                }
                if pa || pb {
                    union += 1;
                }
            }
            F::one() - F::from_usize_lossy(shared) / F::from_usize_lossy(union)
        }
        BetaMetric::Canberra => x
            .iter()
            .zip(y)
            .filter(|(&a, &b)| a + b > F::zero())
            .map(|(&a, &b)| (a - b).abs() / (a + b))
            .sum(),
    };
    Ok(value)
}

/// Mean beta dissimilarity between one sample and every member of a
/// reference cohort. Both must use the same taxon order.
pub fn reference_dissimilarity(
    sample: &Sample,
    reference: &SampleSet,
    metric: BetaMetric,
) -> Result<f64, DiversityError> {
    let x = reference.abundance_vector(sample);
    let rows: Vec<Vec<f64>> = reference
        .samples
        .iter()
        .map(|r| reference.abundance_vector(r))
        .collect();
    mean_dissimilarity(&x, &rows, metric)
}

/// Mean beta dissimilarity of `x` against raw reference vectors.
pub fn mean_dissimilarity<F: Scalar>(
    x: &[F],
    reference: &[Vec<F>],
    metric: BetaMetric,
) -> Result<F, DiversityError> {
    if reference.is_empty() {
        return Err(DiversityError::EmptyReference);
    }
    let mut total = F::zero();
    for r in reference {
        total = total + beta_dissimilarity(x, r, metric)?;
    }
    Ok(total / F::from_usize_lossy(reference.len()))
}

/// All three alpha metrics plus mean dissimilarity to a reference cohort.
pub fn diversity_profile<F: Scalar>(
    abundance: &[F],
    reference: &[Vec<F>],
) -> Result<DiversityProfile<F>, DiversityError> {
    let mut beta_to_reference = BTreeMap::new();
    for metric in BetaMetric::ALL {
        beta_to_reference.insert(metric, mean_dissimilarity(abundance, reference, metric)?);
    }
    Ok(DiversityProfile {
        shannon: alpha_diversity(abundance, AlphaMetric::Shannon)?,
        simpson: alpha_diversity(abundance, AlphaMetric::Simpson)?,
        berger_parker: alpha_diversity(abundance, AlphaMetric::BergerParker)?,
        beta_to_reference,
    })
}
