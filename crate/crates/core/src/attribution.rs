//! Per-sample Shapley attributions for boosted tree ensembles, on the
//! margin (log-odds) scale, with path-dependent conditioning: a feature
//! outside the coalition is integrated out by following both children in
//! proportion to their training cover.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{align, NodeKind, Tree, TreeEnsemble};
use crate::scalar::Scalar;

/// Largest feature count accepted by [`brute_force_shapley`].
pub const BRUTE_FORCE_MAX_FEATURES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttributionError {
    #[error("model integrity error: tree {tree} node {node} has zero cover")]
    ZeroCover { tree: usize, node: usize },
    #[error("brute-force Shapley limited to {max} features, model has {count}")]
    TooManyFeatures { count: usize, max: usize },
    #[error("feature alignment error: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution<F> {
    pub base_value: F,
    pub contributions: BTreeMap<String, F>,
    pub model_output: F,
}

impl<F: Scalar> ShapAttribution<F> {
    /// `base_value + Σ contributions - model_output`.
    pub fn efficiency_gap(&self) -> F {
        self.base_value + self.contributions.values().copied().sum::<F>() - self.model_output
    }
}

fn check_covers<F: Scalar>(model: &TreeEnsemble<F>) -> Result<(), AttributionError> {
    for (t, tree) in model.trees.iter().enumerate() {
        // also rejects NaN covers
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if let Some(node) = tree.nodes.iter().position(|n| !(n.cover > F::zero())) {
            return Err(AttributionError::ZeroCover { tree: t, node });
        }
    }
    Ok(())
}

/// Cover-weighted mean leaf value.
fn expected_value<F: Scalar>(tree: &Tree<F>, i: usize) -> F {
    match tree.nodes[i].kind {
        NodeKind::Leaf { value } => value,
        NodeKind::Split { left, right, .. } => {
            let (cl, cr) = (tree.nodes[left].cover, tree.nodes[right].cover);
            (cl * expected_value(tree, left) + cr * expected_value(tree, right)) / (cl + cr)
        }
    }
}

fn base_value<F: Scalar>(model: &TreeEnsemble<F>) -> F {
    model.base_score
        + model.learning_rate * model.trees.iter().map(|t| expected_value(t, 0)).sum::<F>()
}

#[derive(Debug, Clone, Copy)]
struct PathElement<F> {
    feature: Option<usize>,
    zero_fraction: F,
    one_fraction: F,
    weight: F,
}

fn extend_path<F: Scalar>(
    path: &mut Vec<PathElement<F>>,
    zero_fraction: F,
    one_fraction: F,
    feature: Option<usize>,
) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { F::one() } else { F::zero() },
    });
    let d1 = F::from_usize_lossy(depth + 1);
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight =
            path[i + 1].weight + one_fraction * w * F::from_usize_lossy(i + 1) / d1;
        path[i].weight = zero_fraction * w * F::from_usize_lossy(depth - i) / d1;
    }
}

fn unwind_path<F: Scalar>(path: &mut Vec<PathElement<F>>, index: usize) {
    let depth = path.len() - 1;
    let PathElement {
        one_fraction,
        zero_fraction,
        ..
    } = path[index];
    let d1 = F::from_usize_lossy(depth + 1);
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one_fraction != F::zero() {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / (F::from_usize_lossy(i + 1) * one_fraction);
            next = tmp - path[i].weight * zero_fraction * F::from_usize_lossy(depth - i) / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero_fraction * F::from_usize_lossy(depth - i));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_sum<F: Scalar>(path: &[PathElement<F>], index: usize) -> F {
    let depth = path.len() - 1;
    let PathElement {
        one_fraction,
        zero_fraction,
        ..
    } = path[index];
    let d1 = F::from_usize_lossy(depth + 1);
    let mut next = path[depth].weight;
    let mut total = F::zero();
    for i in (0..depth).rev() {
        let di = F::from_usize_lossy(depth - i);
        if one_fraction != F::zero() {
            let tmp = next * d1 / (F::from_usize_lossy(i + 1) * one_fraction);
            total = total + tmp;
            next = path[i].weight - tmp * zero_fraction * di / d1;
        } else if zero_fraction != F::zero() {
            total = total + path[i].weight / zero_fraction * d1 / di;
        }
    }
    total
}

struct Walk<'a, F> {
    tree: &'a Tree<F>,
    row: &'a [F],
    scale: F,
    phi: &'a mut [F],
}

impl<F: Scalar> Walk<'_, F> {
    fn recurse(
        &mut self,
        node: usize,
        mut path: Vec<PathElement<F>>,
        zero_fraction: F,
        one_fraction: F,
        feature: Option<usize>,
    ) {
        extend_path(&mut path, zero_fraction, one_fraction, feature);
        let n = &self.tree.nodes[node];
        match n.kind {
            NodeKind::Leaf { value } => {
                for i in 1..path.len() {
                    let w = unwound_sum(&path, i);
                    let el = path[i];
                    let f = el.feature.expect("only the root element lacks a feature");
                    self.phi[f] =
                        self.phi[f] + w * (el.one_fraction - el.zero_fraction) * value * self.scale;
                }
            }
            NodeKind::Split {
                feature: f,
                threshold,
                left,
                right,
                ..
            } => {
                let (hot, cold) = if self.row[f] < threshold {
                    (left, right)
                } else {
                    (right, left)
                };
                let hot_zero = self.tree.nodes[hot].cover / n.cover;
                let cold_zero = self.tree.nodes[cold].cover / n.cover;
                let mut incoming_zero = F::one();
                let mut incoming_one = F::one();
                if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                    incoming_zero = path[k].zero_fraction;
                    incoming_one = path[k].one_fraction;
                    unwind_path(&mut path, k);
                }
                self.recurse(
                    hot,
                    path.clone(),
                    hot_zero * incoming_zero,
                    incoming_one,
                    Some(f),
                );
                self.recurse(cold, path, cold_zero * incoming_zero, F::zero(), Some(f));
            }
        }
    }
}

/// Path-dependent tree Shapley values of one row already in the model's
/// feature order.
pub fn tree_shap_row<F: Scalar>(
    model: &TreeEnsemble<F>,
    row: &[F],
) -> Result<ShapAttribution<F>, AttributionError> {
    check_row(model, row)?;
    check_covers(model)?;
    let mut phi = vec![F::zero(); model.feature_order.len()];
    for tree in &model.trees {
        Walk {
            tree,
            row,
            scale: model.learning_rate,
            phi: &mut phi,
        }
        .recurse(0, Vec::new(), F::one(), F::one(), None);
    }
    Ok(assemble(model, row, phi))
}

/// [`tree_shap_row`] for a named feature map.
pub fn tree_shap<F: Scalar>(
    model: &TreeEnsemble<F>,
    values: &BTreeMap<String, F>,
) -> Result<ShapAttribution<F>, AttributionError> {
    let row = align(&model.feature_order, values)
        .map_err(|e| AttributionError::Alignment(e.to_string()))?;
    tree_shap_row(model, &row)
}

fn check_row<F: Scalar>(model: &TreeEnsemble<F>, row: &[F]) -> Result<(), AttributionError> {
    if row.len() != model.feature_order.len() {
        return Err(AttributionError::Alignment(format!(
            "row has {} values, model {} features",
            row.len(),
            model.feature_order.len()
        )));
    }
    Ok(())
}

fn assemble<F: Scalar>(model: &TreeEnsemble<F>, row: &[F], phi: Vec<F>) -> ShapAttribution<F> {
    ShapAttribution {
        base_value: base_value(model),
        contributions: model.feature_order.iter().cloned().zip(phi).collect(),
        model_output: model.margin_row(row),
    }
}

/// Tree expectation given that only the features in `mask` are known.
fn conditional_value<F: Scalar>(tree: &Tree<F>, i: usize, row: &[F], mask: u32) -> F {
    match tree.nodes[i].kind {
        NodeKind::Leaf { value } => value,
        NodeKind::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            if mask & (1 << feature) != 0 {
                conditional_value(
                    tree,
                    if row[feature] < threshold {
                        left
                    } else {
                        right
                    },
                    row,
                    mask,
                )
            } else {
                let (cl, cr) = (tree.nodes[left].cover, tree.nodes[right].cover);
                (cl * conditional_value(tree, left, row, mask)
                    + cr * conditional_value(tree, right, row, mask))
                    / (cl + cr)
            }
        }
    }
}

/// Exact Shapley values by enumerating every coalition. Exponential in the
/// feature count; intended as a reference for [`tree_shap_row`].
pub fn brute_force_shapley<F: Scalar>(
    model: &TreeEnsemble<F>,
    row: &[F],
) -> Result<ShapAttribution<F>, AttributionError> {
    let m = model.feature_order.len();
    if m > BRUTE_FORCE_MAX_FEATURES {
        return Err(AttributionError::TooManyFeatures {
            count: m,
            max: BRUTE_FORCE_MAX_FEATURES,
        });
    }
    check_row(model, row)?;
    check_covers(model)?;
    let v: Vec<F> = (0..1u32 << m)
        .map(|mask| {
            model.base_score
                + model.learning_rate
                    * model
                        .trees
                        .iter()
                        .map(|t| conditional_value(t, 0, row, mask))
                        .sum::<F>()
        })
        .collect();
    // weight(s) = s! (m - s - 1)! / m!
    let mut weight = vec![F::zero(); m.max(1)];
    for (s, w) in weight.iter_mut().enumerate().take(m) {
        let mut x = F::one() / F::from_usize_lossy(m);
        // 1 / (m * C(m-1, s))
        for k in 1..=s {
            x = x * F::from_usize_lossy(k) / F::from_usize_lossy(m - k);
        }
        *w = x;
    }
    let mut phi = vec![F::zero(); m];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for mask in 0..1u32 << m {
            if mask & bit == 0 {
                *p = *p
                    + weight[mask.count_ones() as usize]
                        * (v[(mask | bit) as usize] - v[mask as usize]);
            }
        }
    }
    Ok(assemble(model, row, phi))
}

/// Top `top_k` contributions by magnitude, ties ordered by feature name.
pub fn rank_features<F: Scalar>(attr: &ShapAttribution<F>, top_k: usize) -> Vec<(String, F)> {
    let mut v: Vec<(String, F)> = attr
        .contributions
        .iter()
        .map(|(k, &x)| (k.clone(), x))
        .collect();
    v.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    v.truncate(top_k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{fit_gbdt, testdata::separable, HyperParams, Node};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn ensemble(trees: Vec<Tree<f64>>, m: usize, base: f64, lr: f64) -> TreeEnsemble<f64> {
        TreeEnsemble {
            trees,
            base_score: base,
            learning_rate: lr,
            feature_order: (0..m).map(|i| format!("f{i}")).collect(),
        }
    }

    fn random_tree<R: Rng>(r: &mut R, m: usize, depth: usize) -> Tree<f64> {
        fn build<R: Rng>(r: &mut R, m: usize, depth: usize, nodes: &mut Vec<Node<f64>>) -> usize {
            let i = nodes.len();
            if depth == 0 || r.random_bool(0.2) {
                let cover = r.random_range(0.1..5.0);
                nodes.push(Node {
                    kind: NodeKind::Leaf {
                        value: r.random_range(-2.0..2.0),
                    },
                    cover,
                    train_fraction: 0.0,
                });
                return i;
            }
            nodes.push(Node {
                kind: NodeKind::Leaf { value: 0.0 },
                cover: 0.0,
                train_fraction: 0.0,
            });
            let feature = r.random_range(0..m);
            let threshold = r.random_range(0.0..1.0);
            let left = build(r, m, depth - 1, nodes);
            let right = build(r, m, depth - 1, nodes);
            nodes[i].cover = nodes[left].cover + nodes[right].cover;
            nodes[i].kind = NodeKind::Split {
                feature,
                threshold,
                left,
                right,
                gain: 0.0,
            };
            i
        }
        let mut nodes = Vec::new();
        build(r, m, depth, &mut nodes);
        Tree { nodes }
    }

    fn assert_close(a: &ShapAttribution<f64>, b: &ShapAttribution<f64>, tol: f64) {
        assert!((a.base_value - b.base_value).abs() < tol);
        for (k, v) in &a.contributions {
            assert!(
                (v - b.contributions[k]).abs() < tol,
                "{k}: {v} vs {}",
                b.contributions[k]
            );
        }
    }

    #[test]
    fn stump_closed_form() {
        let (vl, cl, vr, cr) = (-0.7, 3.0, 1.3, 5.0);
        let model = ensemble(vec![Tree::stump(1, 0.5, (vl, cl), (vr, cr))], 3, 0.0, 1.0);
        let row = [9.0, 0.2, -4.0];
        let a = tree_shap_row(&model, &row).unwrap();
        let expected = vl - (cl * vl + cr * vr) / (cl + cr);
        assert!((a.contributions["f1"] - expected).abs() < 1e-15);
        assert_eq!(a.contributions["f0"], 0.0);
        assert_eq!(a.contributions["f2"], 0.0);
    }

    #[test]
    fn empty_model_is_all_zero() {
        let model = ensemble(vec![], 4, -0.3, 0.1);
        let a = tree_shap_row(&model, &[1.0; 4]).unwrap();
        assert!(a.contributions.values().all(|&v| v == 0.0));
        assert_eq!(a.base_value, -0.3);
        assert_eq!(a.model_output, -0.3);
    }

    #[test]
    fn symmetric_tree_gives_equal_shares() {
        // xor-style: both features split the same way with mirrored leaves
        let leaf = |v: f64| Node {
            kind: NodeKind::Leaf { value: v },
            cover: 1.0,
            train_fraction: 0.25,
        };
        let split = |f, l, r| Node {
            kind: NodeKind::Split {
                feature: f,
                threshold: 0.5,
                left: l,
                right: r,
                gain: 0.0,
            },
            cover: 2.0,
            train_fraction: 0.5,
        };
        let mut root = split(0, 1, 4);
        root.cover = 4.0;
        let tree = Tree {
            nodes: vec![
                root,
                split(1, 2, 3),
                leaf(1.0),
                leaf(0.0),
                split(1, 5, 6),
                leaf(0.0),
                leaf(1.0),
            ],
        };
        let model = ensemble(vec![tree], 2, 0.0, 1.0);
        for row in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
            let a = tree_shap_row(&model, &row).unwrap();
            assert!((a.contributions["f0"] - a.contributions["f1"]).abs() < 1e-15);
            assert_close(&a, &brute_force_shapley(&model, &row).unwrap(), 1e-12);
        }
    }

    #[test]
    fn null_player_is_exactly_zero() {
        let mut r = rng::seeded(1);
        for _ in 0..50 {
            // features 0..3 only; f3 is a dummy
            let trees = (0..3).map(|_| random_tree(&mut r, 3, 4)).collect();
            let model = ensemble(trees, 4, 0.0, 0.3);
            let row: Vec<f64> = (0..4).map(|_| r.random()).collect();
            assert_eq!(
                tree_shap_row(&model, &row).unwrap().contributions["f3"],
                0.0
            );
            assert_eq!(
                brute_force_shapley(&model, &row).unwrap().contributions["f3"],
                0.0
            );
        }
    }

    #[test]
    fn matches_subset_enumeration_on_random_models() {
        let mut r = rng::seeded(2024);
        for case in 0..250 {
            let m = r.random_range(1..=12);
            let n_trees = r.random_range(0..=4);
            let trees = (0..n_trees)
                .map(|_| {
                    let depth = r.random_range(1..=5);
                    random_tree(&mut r, m, depth)
                })
                .collect();
            let model = ensemble(
                trees,
                m,
                r.random_range(-1.0..1.0),
                r.random_range(0.05..1.0),
            );
            let row: Vec<f64> = (0..m).map(|_| r.random()).collect();
            let fast = tree_shap_row(&model, &row).unwrap();
            let slow = brute_force_shapley(&model, &row).unwrap();
            for (k, v) in &fast.contributions {
                assert!(
                    (v - slow.contributions[k]).abs() < 1e-9,
                    "case {case} {k}: {v} vs {}",
                    slow.contributions[k]
                );
            }
            assert!(fast.efficiency_gap().abs() < 1e-9);
        }
    }

    #[test]
    fn fitted_model_satisfies_local_accuracy() {
        let data = separable(150, 4);
        let model = fit_gbdt(
            &data,
            &HyperParams {
                n_trees: 30,
                max_depth: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        for row in data.rows.iter().take(40) {
            let a = tree_shap_row(&model, row).unwrap();
            assert!(a.efficiency_gap().abs() < 1e-9);
            assert_close(&a, &brute_force_shapley(&model, row).unwrap(), 1e-9);
        }
    }

    #[test]
    fn zero_cover_is_an_integrity_error() {
        let mut tree = Tree::stump(0, 0.5, (1.0, 1.0), (2.0, 1.0));
        tree.nodes[2].cover = 0.0;
        let model = ensemble(vec![tree], 1, 0.0, 1.0);
        assert_eq!(
            tree_shap_row(&model, &[0.1]),
            Err(AttributionError::ZeroCover { tree: 0, node: 2 })
        );
    }

    #[test]
    fn brute_force_guard() {
        let model = ensemble(vec![], 21, 0.0, 1.0);
        assert!(matches!(
            brute_force_shapley(&model, &[0.0; 21]),
            Err(AttributionError::TooManyFeatures { .. })
        ));
    }

    #[test]
    fn ranking_by_magnitude() {
        let attr = ShapAttribution {
            base_value: 0.0,
            contributions: BTreeMap::from([
                ("c".to_string(), -0.62),
                ("a".to_string(), 0.8),
                ("b".to_string(), 0.77),
            ]),
            model_output: 0.95,
        };
        let names: Vec<String> = rank_features(&attr, 3)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(rank_features(&attr, 3)[2].1, -0.62);
        assert_eq!(rank_features(&attr, 10).len(), 3);
        let zeros = ShapAttribution {
            contributions: BTreeMap::from([
                ("z".into(), 0.0),
                ("m".into(), 0.0),
                ("a".into(), 0.0),
            ]),
            ..attr
        };
        let names: Vec<String> = rank_features(&zeros, 3)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, ["a", "m", "z"]);
    }

    proptest! {
        #[test]
        fn efficiency_on_random_three_feature_trees(seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let trees = (0..3).map(|_| random_tree(&mut r, 3, 2)).collect();
            let model = ensemble(trees, 3, 0.1, 0.5);
            let row: Vec<f64> = (0..3).map(|_| r.random()).collect();
            let a = brute_force_shapley(&model, &row).unwrap();
            prop_assert!(a.efficiency_gap().abs() < 1e-12);
            let b = tree_shap_row(&model, &row).unwrap();
            prop_assert!(b.efficiency_gap().abs() < 1e-12);
        }
    }
}
