//! Binary regression trees grown by exact greedy split search on
//! first/second-order statistics.
//!
//! Nodes are stored in pre-order: a split's left subtree immediately
//! follows it, the right subtree follows the left one.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind<F> {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: F,
        left: usize,
        right: usize,
        gain: F,
    },
    Leaf {
        value: F,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node<F> {
    pub kind: NodeKind<F>,
    /// Sum of hessians of the training rows routed here.
    pub cover: F,
    /// Fraction of the tree's training rows routed here.
    pub train_fraction: F,
}

impl<F: Scalar> Node<F> {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree<F> {
    pub nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tree<F> {
    pub fn leaf(value: F, cover: F) -> Self {
        Self {
            nodes: vec![Node {
                kind: NodeKind::Leaf { value },
                cover,
                train_fraction: F::one(),
            }],
        }
    }

    /// A depth-one tree on `feature`.
    pub fn stump(feature: usize, threshold: F, left: (F, F), right: (F, F)) -> Self {
        let total = left.1 + right.1;
        Self {
            nodes: vec![
                Node {
                    kind: NodeKind::Split {
                        feature,
                        threshold,
                        left: 1,
                        right: 2,
                        gain: F::zero(),
                    },
                    cover: total,
                    train_fraction: F::one(),
                },
                Node {
                    kind: NodeKind::Leaf { value: left.0 },
                    cover: left.1,
                    train_fraction: left.1 / total,
                },
                Node {
                    kind: NodeKind::Leaf { value: right.0 },
                    cover: right.1,
                    train_fraction: right.1 / total,
                },
            ],
        }
    }

    pub fn leaf_index(&self, row: &[F]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i].kind {
                NodeKind::Leaf { .. } => return i,
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if row[feature] < threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn predict(&self, row: &[F]) -> F {
        match self.nodes[self.leaf_index(row)].kind {
            NodeKind::Leaf { value } => value,
            NodeKind::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go<F: Scalar>(t: &Tree<F>, i: usize) -> usize {
            match t.nodes[i].kind {
                NodeKind::Leaf { .. } => 0,
                NodeKind::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Features used by any split, deduplicated and sorted.
    pub fn split_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { feature, .. } => Some(feature),
                NodeKind::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Checks the structural invariants: children exist and covers add up.
    pub fn check(&self, tol: F) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if let NodeKind::Split { left, right, .. } = n.kind {
                if left >= self.nodes.len() || right >= self.nodes.len() || left <= i || right <= i
                {
                    return Err(format!("node {i} has invalid children"));
                }
                let sum = self.nodes[left].cover + self.nodes[right].cover;
                if (sum - n.cover).abs() > tol * (F::one() + n.cover.abs()) {
                    return Err(format!("node {i} cover {} != children {}", n.cover, sum));
                }
            } else if n.cover <= F::zero() {
                return Err(format!("leaf {i} has nonpositive cover"));
            }
        }
        Ok(())
    }
}

/// Split-search settings shared by the boosted and bagged learners.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowParams<F> {
    pub max_depth: usize,
    pub min_child_weight: F,
    pub lambda: F,
}

/// Column-major view of the training rows plus per-feature sort orders.
pub(crate) struct Columns<'a, F> {
    rows: &'a [Vec<F>],
    /// Feature indices in the order used to break gain ties.
    tie_order: Vec<usize>,
}

impl<'a, F: Scalar> Columns<'a, F> {
    /// `names` decides tie-breaking: among equal gains the feature whose
    /// name sorts first wins, independent of column position.
    pub fn new(rows: &'a [Vec<F>], names: &[String]) -> Self {
        let mut tie_order: Vec<usize> = (0..names.len()).collect();
        tie_order.sort_by(|&a, &b| names[a].cmp(&names[b]).then(a.cmp(&b)));
        Self { rows, tie_order }
    }

    fn n_features(&self) -> usize {
        self.tie_order.len()
    }

    fn value(&self, row: usize, feature: usize) -> F {
        self.rows[row][feature]
    }
}

struct Best<F> {
    feature: usize,
    threshold: F,
    gain: F,
}

struct Grower<'c, 'a, F> {
    cols: &'c Columns<'a, F>,
    grad: &'c [F],
    hess: &'c [F],
    params: GrowParams<F>,
    total_rows: F,
    nodes: Vec<Node<F>>,
    in_left: Vec<bool>,
}

fn score<F: Scalar>(g: F, h: F, lambda: F) -> F {
    g * g / (h + lambda)
}

impl<'c, 'a, F: Scalar> Grower<'c, 'a, F> {
    fn find_split(&self, sorted: &[Vec<usize>], g_total: F, h_total: F) -> Option<Best<F>> {
        let lambda = self.params.lambda;
        let parent = score(g_total, h_total, lambda);
        let half = F::lit(0.5);
        let mut best: Option<Best<F>> = None;
        for &j in &self.cols.tie_order {
            let order = &sorted[j];
            let (mut gl, mut hl) = (F::zero(), F::zero());
            for w in 0..order.len().saturating_sub(1) {
                let r = order[w];
                gl = gl + self.grad[r];
                hl = hl + self.hess[r];
                let (a, b) = (self.cols.value(r, j), self.cols.value(order[w + 1], j));
                if a >= b {
                    continue;
                }
                let (gr, hr) = (g_total - gl, h_total - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = half * (score(gl, hl, lambda) + score(gr, hr, lambda) - parent);
                if gain > F::zero() && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = (a + b) * half;
                    if threshold <= a {
                        threshold = b;
                    }
                    best = Some(Best {
                        feature: j,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        let (g, h) = rows.iter().fold((F::zero(), F::zero()), |(g, h), &r| {
            (g + self.grad[r], h + self.hess[r])
        });
        let index = self.nodes.len();
        let fraction = F::from_usize_lossy(rows.len()) / self.total_rows;
        let leaf = Node {
            kind: NodeKind::Leaf {
                value: -g / (h + self.params.lambda),
            },
            cover: h,
            train_fraction: fraction,
        };
        if depth >= self.params.max_depth || rows.len() < 2 {
            self.nodes.push(leaf);
            return index;
        }
        let Some(best) = self.find_split(&sorted, g, h) else {
            self.nodes.push(leaf);
            return index;
        };
        self.nodes.push(leaf);
        for &r in rows {
            self.in_left[r] = self.cols.value(r, best.feature) < best.threshold;
        }
        let (mut left_sorted, mut right_sorted) = (
            Vec::with_capacity(sorted.len()),
            Vec::with_capacity(sorted.len()),
        );
        for order in sorted {
            let (l, r): (Vec<usize>, Vec<usize>) =
                order.into_iter().partition(|&r| self.in_left[r]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let left = self.grow(left_sorted, depth + 1);
        let right = self.grow(right_sorted, depth + 1);
        self.nodes[index].kind = NodeKind::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
            gain: best.gain,
        };
        index
    }
}

/// Grows one tree on `rows` (indices into the column view; may repeat
/// only if the caller bootstraps, which no current learner does).
pub(crate) fn grow_tree<F: Scalar>(
    cols: &Columns<'_, F>,
    rows: &[usize],
    grad: &[F],
    hess: &[F],
    params: GrowParams<F>,
) -> Tree<F> {
    let sorted: Vec<Vec<usize>> = if cols.n_features() == 0 {
        vec![rows.to_vec()]
    } else {
        (0..cols.n_features())
            .map(|j| {
                let mut order = rows.to_vec();
                order.sort_by(|&a, &b| {
                    cols.value(a, j)
                        .partial_cmp(&cols.value(b, j))
                        .expect("finite features")
                        .then(a.cmp(&b))
                });
                order
            })
            .collect()
    };
    let mut grower = Grower {
        cols,
        grad,
        hess,
        params,
        total_rows: F::from_usize_lossy(rows.len()),
        nodes: Vec::new(),
        in_left: vec![false; cols.rows.len()],
    };
    grower.grow(sorted, 0);
    Tree {
        nodes: grower.nodes,
    }
}
