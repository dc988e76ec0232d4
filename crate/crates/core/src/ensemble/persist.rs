//! Line-oriented model document.
//!
//! ```text
//! adam-model 1
//! kind gbdt
//! hyper n_trees=100 max_depth=3 ...
//! features 2
//! feature <name>
//! median <17-digit value> <name>
//! base_score <value>
//! learning_rate <value>
//! trees 1
//! tree 3
//! split <feature> <threshold> <gain> <cover> <train_fraction>
//! leaf <value> <cover> <train_fraction>
//! leaf <value> <cover> <train_fraction>
//! end
//! ```
//!
//! Trees are written pre-order; every real number uses 17 significant
//! decimal digits so that parsing reproduces the exact `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{
    HyperParams, LogisticModel, Model, ModelKind, Node, NodeKind, RandomForest, Tree, TreeEnsemble,
};
use crate::dataset::Imputer;
use crate::scalar::Scalar;

const MAGIC: &str = "adam-model 1";

#[derive(Debug, Error, PartialEq)]
pub enum PersistError {
    #[error("model document line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A deployable model: the classifier, the imputer learned on its training
/// partition and the hyperparameters it was fit with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F> {
    pub model: Model<F>,
    pub imputer: Imputer,
    pub hyperparams: HyperParams,
}

pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_tree<F: Scalar>(out: &mut String, tree: &Tree<F>, i: usize) {
    let n = &tree.nodes[i];
    match n.kind {
        NodeKind::Split {
            feature,
            threshold,
            left,
            right,
            gain,
        } => {
            let _ = writeln!(
                out,
                "split {feature} {} {} {} {}",
                fmt_real(threshold.as_f64()),
                fmt_real(gain.as_f64()),
                fmt_real(n.cover.as_f64()),
                fmt_real(n.train_fraction.as_f64())
            );
            write_tree(out, tree, left);
            write_tree(out, tree, right);
        }
        NodeKind::Leaf { value } => {
            let _ = writeln!(
                out,
                "leaf {} {} {}",
                fmt_real(value.as_f64()),
                fmt_real(n.cover.as_f64()),
                fmt_real(n.train_fraction.as_f64())
            );
        }
    }
}

fn write_trees<F: Scalar>(out: &mut String, trees: &[Tree<F>]) {
    let _ = writeln!(out, "trees {}", trees.len());
    for t in trees {
        let _ = writeln!(out, "tree {}", t.nodes.len());
        write_tree(out, t, 0);
    }
}

pub fn to_document<F: Scalar>(bundle: &ModelBundle<F>) -> String {
    let mut out = String::new();
    let m = &bundle.model;
    let hp = &bundle.hyperparams;
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "kind {}", m.kind().short_name());
    let _ = writeln!(
        out,
        "hyper n_trees={} max_depth={} min_child_weight={} l2_lambda={} learning_rate={} subsample_fraction={} n_selected_features={}",
        hp.n_trees,
        hp.max_depth,
        fmt_real(hp.min_child_weight),
        fmt_real(hp.l2_lambda),
        fmt_real(hp.learning_rate),
        fmt_real(hp.subsample_fraction),
        hp.n_selected_features
    );
    let _ = writeln!(out, "features {}", m.feature_order().len());
    for f in m.feature_order() {
        let _ = writeln!(out, "feature {f}");
    }
    for (name, v) in &bundle.imputer.medians {
        let _ = writeln!(out, "median {} {name}", fmt_real(*v));
    }
    match m {
        Model::Gbdt(e) => {
            let _ = writeln!(out, "base_score {}", fmt_real(e.base_score.as_f64()));
            let _ = writeln!(out, "learning_rate {}", fmt_real(e.learning_rate.as_f64()));
            write_trees(&mut out, &e.trees);
        }
        Model::RandomForest(f) => write_trees(&mut out, &f.trees),
        Model::Logistic(l) => {
            let _ = writeln!(out, "intercept {}", fmt_real(l.intercept.as_f64()));
            let _ = writeln!(out, "solver {} {}", l.iterations, l.converged);
            for ((w, mu), s) in l.weights.iter().zip(&l.means).zip(&l.scales) {
                let _ = writeln!(
                    out,
                    "coef {} {} {}",
                    fmt_real(w.as_f64()),
                    fmt_real(mu.as_f64()),
                    fmt_real(s.as_f64())
                );
            }
        }
    }
    let _ = writeln!(out, "end");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, PersistError> {
        Err(PersistError::Parse {
            line: self.line,
            message: message.into(),
        })
    }

    fn next(&mut self) -> Result<&'a str, PersistError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => self.err("unexpected end of document"),
        }
    }

    /// Next line, which must start with `key`; returns the remainder.
    fn expect(&mut self, key: &str) -> Result<&'a str, PersistError> {
        let l = self.next()?;
        match l.strip_prefix(key) {
            Some(rest) if rest.is_empty() => Ok(rest),
            Some(rest) if rest.starts_with(' ') => Ok(&rest[1..]),
            _ => self.err(format!("expected {key:?}, found {l:?}")),
        }
    }

    fn real(&self, s: &str) -> Result<f64, PersistError> {
        s.parse::<f64>()
            .or_else(|_| self.err(format!("bad real {s:?}")))
    }

    fn count(&self, s: &str) -> Result<usize, PersistError> {
        s.trim()
            .parse::<usize>()
            .or_else(|_| self.err(format!("bad count {s:?}")))
    }
}

fn read_node<F: Scalar>(
    lines: &mut Lines<'_>,
    nodes: &mut Vec<Node<F>>,
    n_features: usize,
) -> Result<usize, PersistError> {
    let l = lines.next()?;
    let parts: Vec<&str> = l.split_whitespace().collect();
    let index = nodes.len();
    match parts.as_slice() {
        ["leaf", v, c, f] => {
            nodes.push(Node {
                kind: NodeKind::Leaf {
                    value: F::lit(lines.real(v)?),
                },
                cover: F::lit(lines.real(c)?),
                train_fraction: F::lit(lines.real(f)?),
            });
        }
        ["split", feat, t, g, c, f] => {
            let feature = lines.count(feat)?;
            if feature >= n_features {
                return lines.err(format!("feature index {feature} out of range"));
            }
            let threshold = F::lit(lines.real(t)?);
            let gain = F::lit(lines.real(g)?);
            nodes.push(Node {
                kind: NodeKind::Leaf { value: F::zero() },
                cover: F::lit(lines.real(c)?),
                train_fraction: F::lit(lines.real(f)?),
            });
            let left = read_node(lines, nodes, n_features)?;
            let right = read_node(lines, nodes, n_features)?;
            nodes[index].kind = NodeKind::Split {
                feature,
                threshold,
                left,
                right,
                gain,
            };
        }
        _ => return lines.err(format!("expected a node, found {l:?}")),
    }
    Ok(index)
}

fn read_trees<F: Scalar>(
    lines: &mut Lines<'_>,
    n_features: usize,
) -> Result<Vec<Tree<F>>, PersistError> {
    let n = {
        let r = lines.expect("trees")?;
        lines.count(r)?
    };
    let mut trees = Vec::with_capacity(n);
    for _ in 0..n {
        let declared = {
            let r = lines.expect("tree")?;
            lines.count(r)?
        };
        let mut nodes = Vec::with_capacity(declared);
        read_node(lines, &mut nodes, n_features)?;
        if nodes.len() != declared {
            return lines.err(format!(
                "tree declared {declared} nodes, read {}",
                nodes.len()
            ));
        }
        trees.push(Tree { nodes });
    }
    Ok(trees)
}

pub fn from_document<F: Scalar>(text: &str) -> Result<ModelBundle<F>, PersistError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MAGIC {
        return lines.err("not an adam model document");
    }
    let kind: ModelKind = {
        let r = lines.expect("kind")?;
        r.parse().or_else(|e: String| lines.err(e))?
    };
    let hyper = lines.expect("hyper")?;
    let mut kv = BTreeMap::new();
    for part in hyper.split_whitespace() {
        let Some((k, v)) = part.split_once('=') else {
            return lines.err(format!("bad hyperparameter {part:?}"));
        };
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k).copied().ok_or_else(|| PersistError::Parse {
            line: lines.line,
            message: format!("missing {k}"),
        })
    };
    let hyperparams = HyperParams {
        n_trees: lines.count(get("n_trees")?)?,
        max_depth: lines.count(get("max_depth")?)?,
        min_child_weight: lines.real(get("min_child_weight")?)?,
        l2_lambda: lines.real(get("l2_lambda")?)?,
        learning_rate: lines.real(get("learning_rate")?)?,
        subsample_fraction: lines.real(get("subsample_fraction")?)?,
        n_selected_features: lines.count(get("n_selected_features")?)?,
    };
    let n_features = {
        let r = lines.expect("features")?;
        lines.count(r)?
    };
    let mut feature_order = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        feature_order.push(lines.expect("feature")?.to_string());
    }
    let mut medians = BTreeMap::new();
    let mut pending = lines.next()?;
    while let Some(rest) = pending.strip_prefix("median ") {
        let Some((v, name)) = rest.split_once(' ') else {
            return lines.err("bad median line");
        };
        medians.insert(name.to_string(), lines.real(v)?);
        pending = lines.next()?;
    }
    // `pending` holds the first model-specific line
    let model = match kind {
        ModelKind::Gbdt => {
            let Some(b) = pending.strip_prefix("base_score ") else {
                return lines.err("expected base_score");
            };
            let base_score = F::lit(lines.real(b)?);
            let r = lines.expect("learning_rate")?;
            let learning_rate = F::lit(lines.real(r)?);
            let trees = read_trees(&mut lines, n_features)?;
            Model::Gbdt(TreeEnsemble {
                trees,
                base_score,
                learning_rate,
                feature_order,
            })
        }
        ModelKind::RandomForest => {
            let Some(r) = pending.strip_prefix("trees ") else {
                return lines.err("expected trees");
            };
            // re-dispatch through read_trees by reconstructing the header
            let count = lines.count(r)?;
            let mut trees = Vec::with_capacity(count);
            for _ in 0..count {
                let declared = {
                    let r = lines.expect("tree")?;
                    lines.count(r)?
                };
                let mut nodes = Vec::with_capacity(declared);
                read_node(&mut lines, &mut nodes, n_features)?;
                trees.push(Tree { nodes });
            }
            Model::RandomForest(RandomForest {
                trees,
                feature_order,
            })
        }
        ModelKind::LogisticRegression => {
            let Some(i) = pending.strip_prefix("intercept ") else {
                return lines.err("expected intercept");
            };
            let intercept = F::lit(lines.real(i)?);
            let solver = lines.expect("solver")?;
            let (iterations, converged) = match solver.split_whitespace().collect::<Vec<_>>()[..] {
                [n, c] => (
                    lines.count(n)?,
                    c.parse::<bool>()
                        .or_else(|_| lines.err(format!("bad flag {c:?}")))?,
                ),
                _ => return lines.err("solver needs iterations and a convergence flag"),
            };
            let (mut weights, mut means, mut scales) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..n_features {
                let r = lines.expect("coef")?;
                let p: Vec<&str> = r.split_whitespace().collect();
                if p.len() != 3 {
                    return lines.err("coef needs 3 values");
                }
                weights.push(F::lit(lines.real(p[0])?));
                means.push(F::lit(lines.real(p[1])?));
                scales.push(F::lit(lines.real(p[2])?));
            }
            Model::Logistic(LogisticModel {
                weights,
                intercept,
                means,
                scales,
                feature_order,
                iterations,
                converged,
            })
        }
    };
    lines.expect("end")?;
    Ok(ModelBundle {
        model,
        imputer: Imputer { medians },
        hyperparams,
    })
}
