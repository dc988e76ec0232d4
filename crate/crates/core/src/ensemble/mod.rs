//! Gradient-boosted trees, the two baseline classifiers, feature selection,
//! hyperparameter search and classification metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureMatrix;
use crate::scalar::Scalar;

mod forest;
mod gbdt;
mod logistic;
mod metrics;
pub mod persist;
mod pipeline;
mod select;
mod tree;
mod tune;

pub use forest::{fit_random_forest, RandomForest};
pub use gbdt::{fit_gbdt, fit_gbdt_traced, log_loss, TreeEnsemble};
pub use logistic::{fit_logistic, LogisticModel};
pub(crate) use metrics::midranks;
pub use metrics::{evaluate_metrics, MetricTriple, MetricsError};
pub use persist::{from_document, to_document, ModelBundle, PersistError};
pub use pipeline::{
    prepare_train, train_model, train_prepared, PreparedTrain, TrainOptions, Trained,
};
pub use select::{rank_features_by_gain, select_features};
pub use tree::{Node, NodeKind, Tree};
pub use tune::{grouped_folds, tune, tune_with, SearchSpace, TrialRecord, TuneOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("degenerate fit: training set contains only one class")]
    SingleClass,
    #[error("degenerate fit: training set is empty")]
    EmptyTrain,
    #[error("feature alignment error: {0}")]
    FeatureAlignment(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbdt,
    RandomForest,
    LogisticRegression,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::Gbdt,
        ModelKind::RandomForest,
        ModelKind::LogisticRegression,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::Gbdt => "gbdt",
            ModelKind::RandomForest => "rf",
            ModelKind::LogisticRegression => "lr",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gbdt" | "xgb" | "xgboost" => Ok(ModelKind::Gbdt),
            "rf" | "random_forest" | "random-forest" => Ok(ModelKind::RandomForest),
            "lr" | "logistic" | "logistic_regression" | "logistic-regression" => {
                Ok(ModelKind::LogisticRegression)
            }
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Learner settings. Random forests read `n_trees`, `max_depth`,
/// `min_child_weight` and `subsample_fraction`; logistic regression reads
/// `l2_lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub subsample_fraction: f64,
    pub n_selected_features: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            min_child_weight: 1.0,
            l2_lambda: 1.0,
            learning_rate: 0.1,
            subsample_fraction: 1.0,
            n_selected_features: 20,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: &str| Err(EnsembleError::InvalidParams(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must lie in (0, 1]");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be finite and >= 0");
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return bad("min_child_weight must be finite and >= 0");
        }
        if self.n_selected_features == 0 {
            return bad("n_selected_features must be >= 1");
        }
        Ok(())
    }
}

/// Any fitted classifier.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<F> {
    Gbdt(TreeEnsemble<F>),
    RandomForest(RandomForest<F>),
    Logistic(LogisticModel<F>),
}

impl<F: Scalar> Model<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gbdt(_) => ModelKind::Gbdt,
            Model::RandomForest(_) => ModelKind::RandomForest,
            Model::Logistic(_) => ModelKind::LogisticRegression,
        }
    }

    pub fn feature_order(&self) -> &[String] {
        match self {
            Model::Gbdt(m) => &m.feature_order,
            Model::RandomForest(m) => &m.feature_order,
            Model::Logistic(m) => &m.feature_order,
        }
    }

    /// Positive-class probability for a row already in `feature_order`.
    pub fn predict_row(&self, row: &[F]) -> F {
        match self {
            Model::Gbdt(m) => m.predict_row(row),
            Model::RandomForest(m) => m.predict_row(row),
            Model::Logistic(m) => m.predict_row(row),
        }
    }

    pub fn predict_named(&self, values: &BTreeMap<String, F>) -> Result<F, EnsembleError> {
        Ok(self.predict_row(&align(self.feature_order(), values)?))
    }

    /// Scores a matrix whose columns may be a superset of the model's features.
    pub fn predict_matrix(&self, data: &FeatureMatrix<F>) -> Result<Vec<F>, EnsembleError> {
        let view = data
            .select_columns(self.feature_order())
            .ok_or_else(|| EnsembleError::FeatureAlignment("matrix lacks model features".into()))?;
        Ok(view.rows.iter().map(|r| self.predict_row(r)).collect())
    }
}

pub(crate) fn align<F: Scalar>(
    order: &[String],
    values: &BTreeMap<String, F>,
) -> Result<Vec<F>, EnsembleError> {
    order
        .iter()
        .map(|n| {
            values
                .get(n)
                .copied()
                .ok_or_else(|| EnsembleError::FeatureAlignment(format!("missing feature {n:?}")))
        })
        .collect()
}

pub(crate) fn check_training<F: Scalar>(data: &FeatureMatrix<F>) -> Result<(), EnsembleError> {
    if data.n_rows() == 0 {
        return Err(EnsembleError::EmptyTrain);
    }
    let pos = data.labels.iter().filter(|l| l.is_positive()).count();
    if pos == 0 || pos == data.n_rows() {
        return Err(EnsembleError::SingleClass);
    }
    for (row, r) in data.rows.iter().enumerate() {
        if r.len() != data.n_features() {
            return Err(EnsembleError::FeatureAlignment(format!(
                "row {row} has {} values",
                r.len()
            )));
        }
        if let Some(column) = r.iter().position(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFinite { row, column });
        }
    }
    Ok(())
}

/// Fits a classifier of the requested kind on the given columns.
pub fn fit_model<F: Scalar>(
    data: &FeatureMatrix<F>,
    kind: ModelKind,
    hp: &HyperParams,
    seed: u64,
) -> Result<Model<F>, EnsembleError> {
    Ok(match kind {
        ModelKind::Gbdt => Model::Gbdt(fit_gbdt(data, hp, seed)?),
        ModelKind::RandomForest => Model::RandomForest(fit_random_forest(data, hp, seed)?),
        ModelKind::LogisticRegression => Model::Logistic(fit_logistic(data, hp)?),
    })
}

/// `fit_model` for the two baseline learners.
pub fn fit_baseline<F: Scalar>(
    data: &FeatureMatrix<F>,
    kind: ModelKind,
    hp: &HyperParams,
    seed: u64,
) -> Result<Model<F>, EnsembleError> {
    fit_model(data, kind, hp, seed)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("gbdt".parse::<ModelKind>().unwrap(), ModelKind::Gbdt);
        assert_eq!("RF".parse::<ModelKind>().unwrap(), ModelKind::RandomForest);
        assert_eq!(
            "lr".parse::<ModelKind>().unwrap(),
            ModelKind::LogisticRegression
        );
        assert!("svm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn params_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let hp = HyperParams {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(hp.validate().is_err());
        let hp = HyperParams {
            subsample_fraction: 1.5,
            ..Default::default()
        };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn predict_named_requires_every_feature() {
        let data = testdata::separable(60, 1);
        let m = fit_model(
            &data,
            ModelKind::Gbdt,
            &HyperParams {
                n_trees: 5,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut v = BTreeMap::from([("x0".to_string(), 0.9)]);
        assert!(matches!(
            m.predict_named(&v),
            Err(EnsembleError::FeatureAlignment(_))
        ));
        v.insert("x1".into(), 0.9);
        assert!(m.predict_named(&v).unwrap() > 0.5);
    }
}
