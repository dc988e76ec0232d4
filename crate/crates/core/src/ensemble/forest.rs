use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, Columns, GrowParams, Tree};
use super::{check_training, EnsembleError, HyperParams};
use crate::dataset::FeatureMatrix;
use crate::rng;
use crate::scalar::Scalar;

/// Bagged depth-limited classification trees. Leaves hold the positive
/// fraction of their rows; the forest averages leaf fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest<F> {
    pub trees: Vec<Tree<F>>,
    pub feature_order: Vec<String>,
}

impl<F: Scalar> RandomForest<F> {
    pub fn predict_row(&self, row: &[F]) -> F {
        let sum: F = self.trees.iter().map(|t| t.predict(row)).sum();
        sum / F::from_usize_lossy(self.trees.len().max(1))
    }
}

/// Each tree sees `round(subsample_fraction * n)` rows drawn without
/// replacement from its own seed stream, so trees fit in parallel and the
/// result matches sequential fitting.
pub fn fit_random_forest<F: Scalar>(
    data: &FeatureMatrix<F>,
    hp: &HyperParams,
    seed: u64,
) -> Result<RandomForest<F>, EnsembleError> {
    hp.validate()?;
    check_training(data)?;
    let n = data.n_rows();
    let grad: Vec<F> = data.targets().into_iter().map(|t| -t).collect();
    let hess = vec![F::one(); n];
    let params = GrowParams {
        max_depth: hp.max_depth,
        min_child_weight: F::lit(hp.min_child_weight),
        lambda: F::zero(),
    };
    let n_sub = ((hp.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    let cols = Columns::new(&data.rows, &data.names);
    let trees = (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let rows: Vec<usize> = if n_sub == n {
                (0..n).collect()
            } else {
                let mut r = rng::seeded(rng::derive_seed(seed, rng::stream::TREE_BASE + t as u64));
                let mut rows = index::sample(&mut r, n, n_sub).into_vec();
                rows.sort_unstable();
                rows
            };
            grow_tree(&cols, &rows, &grad, &hess, params)
        })
        .collect();
    Ok(RandomForest {
        trees,
        feature_order: data.names.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::testdata::separable;

    #[test]
    fn one_tree_full_sample_is_a_single_tree() {
        let data = separable(100, 4);
        let hp = HyperParams {
            n_trees: 1,
            max_depth: 4,
            subsample_fraction: 1.0,
            ..Default::default()
        };
        let forest = fit_random_forest(&data, &hp, 1).unwrap();
        let grad: Vec<f64> = data.targets().into_iter().map(|t| -t).collect();
        let rows: Vec<usize> = (0..100).collect();
        let single = grow_tree(
            &Columns::new(&data.rows, &data.names),
            &rows,
            &grad,
            &vec![1.0; 100],
            GrowParams {
                max_depth: 4,
                min_child_weight: 1.0,
                lambda: 0.0,
            },
        );
        for r in &data.rows {
            assert_eq!(forest.predict_row(r), single.predict(r));
        }
    }

    #[test]
    fn separable_accuracy_and_probability_range() {
        let data = separable(200, 8);
        let hp = HyperParams {
            n_trees: 50,
            max_depth: 6,
            subsample_fraction: 0.8,
            ..Default::default()
        };
        let f = fit_random_forest(&data, &hp, 2).unwrap();
        let acc = data
            .rows
            .iter()
            .zip(&data.labels)
            .filter(|(r, l)| (f.predict_row(r) >= 0.5) == l.is_positive())
            .count();
        assert!(acc >= 190, "{acc}");
        assert!(data
            .rows
            .iter()
            .all(|r| (0.0..=1.0).contains(&f.predict_row(r))));
        assert_eq!(f, fit_random_forest(&data, &hp, 2).unwrap());
    }
}
