//! Random search over declared hyperparameter bounds, scored by mean
//! validation F1 on grouped folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_metrics, fit_model, EnsembleError, HyperParams, MetricsError, ModelKind};
use crate::dataset::{FeatureMatrix, Label};
use crate::rng;
use crate::scalar::Scalar;

pub const N_FOLDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_trees: (usize, usize),
    pub max_depth: (usize, usize),
    pub min_child_weight: (f64, f64),
    /// Sampled log-uniformly.
    pub l2_lambda: (f64, f64),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub subsample_fraction: (f64, f64),
    pub n_selected_features: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            n_trees: (20, 200),
            max_depth: (2, 5),
            min_child_weight: (0.5, 5.0),
            l2_lambda: (0.01, 10.0),
            learning_rate: (0.02, 0.3),
            subsample_fraction: (0.6, 1.0),
            n_selected_features: (5, 40),
        }
    }
}

impl SearchSpace {
    pub fn sample<R: Rng>(&self, rng: &mut R, n_available: usize) -> HyperParams {
        let log_uniform =
            |rng: &mut R, (lo, hi): (f64, f64)| (rng.random_range(lo.ln()..=hi.ln())).exp();
        let hi_feat = self.n_selected_features.1.min(n_available).max(1);
        let lo_feat = self.n_selected_features.0.clamp(1, hi_feat);
        HyperParams {
            n_trees: rng.random_range(self.n_trees.0..=self.n_trees.1),
            max_depth: rng.random_range(self.max_depth.0..=self.max_depth.1),
            min_child_weight: rng.random_range(self.min_child_weight.0..=self.min_child_weight.1),
            l2_lambda: log_uniform(rng, self.l2_lambda),
            learning_rate: log_uniform(rng, self.learning_rate),
            subsample_fraction: rng
                .random_range(self.subsample_fraction.0..=self.subsample_fraction.1),
            n_selected_features: rng.random_range(lo_feat..=hi_feat),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub params: HyperParams,
    pub score: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: HyperParams,
    pub best_score: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

/// Runs `trials` random-search trials against an arbitrary objective.
/// Failed trials score 0; the earliest trial wins ties.
pub fn tune_with<O>(
    space: &SearchSpace,
    trials: usize,
    seed: u64,
    n_available: usize,
    objective: O,
) -> Result<TuneOutcome, EnsembleError>
where
    O: Fn(&HyperParams) -> Result<f64, String> + Sync,
{
    if trials == 0 {
        return Err(EnsembleError::InvalidParams("trials must be >= 1".into()));
    }
    let base = rng::derive_seed(seed, rng::stream::TUNE);
    let params: Vec<HyperParams> = (0..trials)
        .map(|i| {
            space.sample(
                &mut rng::seeded(rng::derive_seed(base, rng::stream::TRIAL_BASE + i as u64)),
                n_available,
            )
        })
        .collect();
    let records: Vec<TrialRecord> = params
        .into_par_iter()
        .enumerate()
        .map(|(index, params)| match objective(&params) {
            Ok(s) if s.is_finite() => TrialRecord {
                index,
                params,
                score: s,
                error: None,
            },
            Ok(s) => TrialRecord {
                index,
                params,
                score: 0.0,
                error: Some(format!("non-finite score {s}")),
            },
            Err(e) => TrialRecord {
                index,
                params,
                score: 0.0,
                error: Some(e),
            },
        })
        .collect();
    let mut best = 0;
    for r in &records {
        if r.score > records[best].score {
            best = r.index;
        }
    }
    Ok(TuneOutcome {
        best: records[best].params,
        best_score: records[best].score,
        best_trial: best,
        trials: records,
    })
}

/// Assigns each row a fold so that all rows of a study id share a fold.
/// Study ids are dealt round-robin per majority label after a seeded shuffle.
pub fn grouped_folds(groups: &[String], labels: &[Label], k: usize, seed: u64) -> Vec<usize> {
    let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (g, l) in groups.iter().zip(labels) {
        let e = votes.entry(g.as_str()).or_default();
        if l.is_positive() {
            e.0 += 1
        } else {
            e.1 += 1
        }
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::FOLDS));
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0;
    for positive in [true, false] {
        let mut ids: Vec<&str> = votes
            .iter()
            .filter(|(_, (p, n))| (p >= n) == positive)
            .map(|(g, _)| *g)
            .collect();
        ids.shuffle(&mut rng);
        for id in ids {
            fold_of.insert(id, next % k);
            next += 1;
        }
    }
    groups.iter().map(|g| fold_of[g.as_str()]).collect()
}

fn f1_or_partial<F: Scalar>(
    r: Result<super::MetricTriple<F>, MetricsError<F>>,
) -> Result<f64, String> {
    match r {
        Ok(m) => Ok(m.f1.as_f64()),
        Err(MetricsError::AucUndefined { f1, .. }) => Ok(f1.as_f64()),
        Err(e) => Err(e.to_string()),
    }
}

/// Mean validation F1 of one configuration over grouped folds, using the
/// first `n_selected_features` entries of `ranked`.
pub fn cross_validate<F: Scalar>(
    train: &FeatureMatrix<F>,
    ranked: &[String],
    folds: &[usize],
    kind: ModelKind,
    hp: &HyperParams,
    seed: u64,
) -> Result<f64, String> {
    let k = hp.n_selected_features.min(ranked.len()).max(1);
    let view = train
        .select_columns(&ranked[..k])
        .ok_or("ranked features missing from matrix")?;
    let n_folds = folds.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for fold in 0..n_folds {
        let tr: Vec<usize> = (0..view.n_rows()).filter(|&i| folds[i] != fold).collect();
        let va: Vec<usize> = (0..view.n_rows()).filter(|&i| folds[i] == fold).collect();
        let model = fit_model(&view.subset(&tr), kind, hp, seed).map_err(|e| e.to_string())?;
        let val = view.subset(&va);
        let scores: Vec<F> = val.rows.iter().map(|r| model.predict_row(r)).collect();
        total += f1_or_partial(evaluate_metrics(&scores, &val.labels, F::lit(0.5)))?;
    }
    Ok(total / n_folds as f64)
}

pub fn tune<F: Scalar>(
    train: &FeatureMatrix<F>,
    ranked: &[String],
    kind: ModelKind,
    trials: usize,
    seed: u64,
    space: &SearchSpace,
) -> Result<TuneOutcome, EnsembleError> {
    let folds = grouped_folds(&train.groups, &train.labels, N_FOLDS, seed);
    let fit_seed = rng::derive_seed(seed, rng::stream::FIT);
    tune_with(space, trials, seed, ranked.len(), |hp| {
        cross_validate(train, ranked, &folds, kind, hp, fit_seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::testdata::separable;

    #[test]
    fn single_trial_returns_its_configuration() {
        let out = tune_with(&SearchSpace::default(), 1, 4, 10, |_| Ok(0.3)).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best, out.trials[0].params);
        assert_eq!(out.best_trial, 0);
    }

    #[test]
    fn constant_objective_picks_first_trial() {
        let out = tune_with(&SearchSpace::default(), 12, 4, 10, |_| Ok(0.5)).unwrap();
        assert_eq!(out.best_trial, 0);
        assert_eq!(out.best, out.trials[0].params);
    }

    #[test]
    fn failed_trials_score_zero() {
        let out = tune_with(&SearchSpace::default(), 5, 1, 10, |hp| {
            if hp.n_trees % 2 == 0 {
                Err("boom".into())
            } else {
                Ok(0.1)
            }
        })
        .unwrap();
        for t in &out.trials {
            if t.error.is_some() {
                assert_eq!(t.score, 0.0);
            }
        }
    }

    #[test]
    fn sampled_params_respect_bounds() {
        let space = SearchSpace::default();
        let mut r = rng::seeded(0);
        for _ in 0..200 {
            let hp = space.sample(&mut r, 12);
            assert!(hp.validate().is_ok());
            assert!((5..=12).contains(&hp.n_selected_features));
            assert!((0.02..=0.3).contains(&hp.learning_rate));
        }
    }

    #[test]
    fn folds_keep_groups_together() {
        let data = separable(90, 1);
        let folds = grouped_folds(&data.groups, &data.labels, 3, 7);
        for i in 0..90 {
            for j in 0..90 {
                if data.groups[i] == data.groups[j] {
                    assert_eq!(folds[i], folds[j]);
                }
            }
        }
        assert!((0..3).all(|f| folds.contains(&f)));
    }

    #[test]
    fn best_score_is_max_of_trial_log() {
        let data = separable(120, 2);
        let ranked = data.names.clone();
        let out = tune(
            &data,
            &ranked,
            ModelKind::Gbdt,
            8,
            3,
            &SearchSpace {
                n_trees: (5, 30),
                ..Default::default()
            },
        )
        .unwrap();
        let max = out.trials.iter().map(|t| t.score).fold(f64::MIN, f64::max);
        assert_eq!(out.best_score, max);
        assert_eq!(
            out,
            tune(
                &data,
                &ranked,
                ModelKind::Gbdt,
                8,
                3,
                &SearchSpace {
                    n_trees: (5, 30),
                    ..Default::default()
                }
            )
            .unwrap()
        );
    }
}
