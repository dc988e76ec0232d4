//! Training on a sample partition: impute, rank features, tune, fit.

use serde::{Deserialize, Serialize};

use super::persist::ModelBundle;
use super::{
    fit_model, rank_features_by_gain, tune, EnsembleError, HyperParams, ModelKind, SearchSpace,
    TuneOutcome,
};
use crate::dataset::{FeatureMatrix, Imputer, SampleSet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Random-search trials; 0 fits `defaults` directly.
    pub tuning_trials: usize,
    pub space: SearchSpace,
    pub defaults: HyperParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            tuning_trials: 20,
            space: SearchSpace::default(),
            defaults: HyperParams::default(),
        }
    }
}

/// Imputer and full-width matrix of a training partition, with features
/// ranked by gain.
#[derive(Debug, Clone)]
pub struct PreparedTrain {
    pub imputer: Imputer,
    pub matrix: FeatureMatrix<f64>,
    pub ranked: Vec<String>,
}

pub fn prepare_train(train: &SampleSet, seed: u64) -> Result<PreparedTrain, EnsembleError> {
    let imputer = Imputer::fit(train);
    let matrix = imputer
        .transform(train, &train.feature_names())
        .map_err(|n| EnsembleError::FeatureAlignment(format!("cannot impute {n:?}")))?;
    let ranked = rank_features_by_gain(&matrix, seed)?
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    Ok(PreparedTrain {
        imputer,
        matrix,
        ranked,
    })
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: ModelBundle<f64>,
    pub tuning: Option<TuneOutcome>,
}

pub fn train_prepared(
    prep: &PreparedTrain,
    kind: ModelKind,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Trained, EnsembleError> {
    let (hp, tuning) = if opts.tuning_trials == 0 {
        (opts.defaults, None)
    } else {
        let out = tune(
            &prep.matrix,
            &prep.ranked,
            kind,
            opts.tuning_trials,
            seed,
            &opts.space,
        )?;
        (out.best, Some(out))
    };
    let k = hp.n_selected_features.min(prep.ranked.len()).max(1);
    let view = prep
        .matrix
        .select_columns(&prep.ranked[..k])
        .expect("ranked names come from the matrix");
    let model = fit_model(&view, kind, &hp, rng::derive_seed(seed, rng::stream::FIT))?;
    Ok(Trained {
        bundle: ModelBundle {
            model,
            imputer: prep.imputer.clone(),
            hyperparams: hp,
        },
        tuning,
    })
}

pub fn train_model(
    train: &SampleSet,
    kind: ModelKind,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Trained, EnsembleError> {
    train_prepared(&prepare_train(train, seed)?, kind, opts, seed)
}
