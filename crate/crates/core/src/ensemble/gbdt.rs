use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, Columns, GrowParams, Tree};
use super::{align, check_training, EnsembleError, HyperParams};
use crate::dataset::FeatureMatrix;
use crate::rng;
use crate::scalar::{logit, sigmoid, Scalar};

/// Boosted trees on the logistic loss.
///
/// `margin(x) = base_score + learning_rate * sum(tree(x))` and the
/// positive-class probability is `sigmoid(margin)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble<F> {
    pub trees: Vec<Tree<F>>,
    pub base_score: F,
    pub learning_rate: F,
    pub feature_order: Vec<String>,
}

impl<F: Scalar> TreeEnsemble<F> {
    pub fn margin_row(&self, row: &[F]) -> F {
        let sum: F = self.trees.iter().map(|t| t.predict(row)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict_row(&self, row: &[F]) -> F {
        sigmoid(self.margin_row(row))
    }

    /// Probability for a sample given by feature name.
    pub fn predict_proba(&self, values: &BTreeMap<String, F>) -> Result<F, EnsembleError> {
        Ok(self.predict_row(&align(&self.feature_order, values)?))
    }

    /// Total split gain per feature over every tree.
    pub fn gain_importance(&self) -> Vec<F> {
        let mut gain = vec![F::zero(); self.feature_order.len()];
        for t in &self.trees {
            for n in &t.nodes {
                if let super::NodeKind::Split {
                    feature, gain: g, ..
                } = n.kind
                {
                    gain[feature] = gain[feature] + g;
                }
            }
        }
        gain
    }
}

/// Mean logistic loss of margins against 0/1 targets.
pub fn log_loss<F: Scalar>(margins: &[F], y: &[F]) -> F {
    // log(1 + e^m) - y*m, written to avoid overflow
    let total: F = margins
        .iter()
        .zip(y)
        .map(|(&m, &t)| {
            let softplus = if m > F::zero() {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            softplus - t * m
        })
        .sum();
    total / F::from_usize_lossy(margins.len())
}

pub fn fit_gbdt<F: Scalar>(
    data: &FeatureMatrix<F>,
    hp: &HyperParams,
    seed: u64,
) -> Result<TreeEnsemble<F>, EnsembleError> {
    fit_gbdt_traced(data, hp, seed).map(|(m, _)| m)
}

/// Fits and also returns the training log-loss before the first round and
/// after each round.
pub fn fit_gbdt_traced<F: Scalar>(
    data: &FeatureMatrix<F>,
    hp: &HyperParams,
    seed: u64,
) -> Result<(TreeEnsemble<F>, Vec<F>), EnsembleError> {
    hp.validate()?;
    check_training(data)?;
    let n = data.n_rows();
    let y = data.targets();
    let prior = y.iter().copied().sum::<F>() / F::from_usize_lossy(n);
    let base_score = logit(prior);
    let lr = F::lit(hp.learning_rate);
    let params = GrowParams {
        max_depth: hp.max_depth,
        min_child_weight: F::lit(hp.min_child_weight),
        lambda: F::lit(hp.l2_lambda),
    };
    let cols = Columns::new(&data.rows, &data.names);
    let mut margins = vec![base_score; n];
    let mut trace = vec![log_loss(&margins, &y)];
    let mut trees = Vec::with_capacity(hp.n_trees);
    let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::FIT));
    let all_rows: Vec<usize> = (0..n).collect();
    let n_sub = ((hp.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    for _ in 0..hp.n_trees {
        let mut grad = Vec::with_capacity(n);
        let mut hess = Vec::with_capacity(n);
        for (&m, &t) in margins.iter().zip(&y) {
            let p = sigmoid(m);
            grad.push(p - t);
            hess.push(p * (F::one() - p));
        }
        let rows = if n_sub == n {
            all_rows.clone()
        } else {
            let mut r = index::sample(&mut rng, n, n_sub).into_vec();
            r.sort_unstable();
            r
        };
        let tree = grow_tree(&cols, &rows, &grad, &hess, params);
        for (m, row) in margins.iter_mut().zip(&data.rows) {
            *m = *m + lr * tree.predict(row);
        }
        trees.push(tree);
        trace.push(log_loss(&margins, &y));
    }
    Ok((
        TreeEnsemble {
            trees,
            base_score,
            learning_rate: lr,
            feature_order: data.names.clone(),
        },
        trace,
    ))
}
