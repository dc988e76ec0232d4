use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple<F = f64> {
    pub accuracy: F,
    pub auc: F,
    pub f1: F,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError<F: Scalar = f64> {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("no observations")]
    Empty,
    /// AUC needs both classes; the threshold metrics are still reported.
    #[error("AUC undefined: labels contain a single class (accuracy {accuracy}, f1 {f1})")]
    AucUndefined { accuracy: F, f1: F },
}

/// Accuracy and F1 at `threshold` (score >= threshold predicts positive),
/// AUC from the midrank statistic.
pub fn evaluate_metrics<F: Scalar>(
    scores: &[F],
    labels: &[Label],
    threshold: F,
) -> Result<MetricTriple<F>, MetricsError<F>> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, l) in scores.iter().zip(labels) {
        match (s >= threshold, l.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let c = F::from_usize_lossy;
    let accuracy = c(tp + tn) / c(scores.len());
    let precision = if tp + fp > 0 {
        c(tp) / c(tp + fp)
    } else {
        F::zero()
    };
    let recall = if tp + fn_ > 0 {
        c(tp) / c(tp + fn_)
    } else {
        F::zero()
    };
    let f1 = if precision + recall > F::zero() {
        F::lit(2.0) * precision * recall / (precision + recall)
    } else {
        F::zero()
    };
    let n_pos = tp + fn_;
    let n_neg = fp + tn;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::AucUndefined { accuracy, f1 });
    }
    let ranks = midranks(scores);
    let pos_rank_sum: F = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_positive())
        .map(|(&r, _)| r)
        .sum();
    let np = c(n_pos);
    let auc = (pos_rank_sum - np * (np + F::one()) * F::lit(0.5)) / (np * c(n_neg));
    Ok(MetricTriple { accuracy, auc, f1 })
}

/// 1-based ranks with ties sharing their average rank.
pub(crate) fn midranks<F: Scalar>(values: &[F]) -> Vec<F> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("comparable scores")
    });
    let mut ranks = vec![F::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let avg = F::from_usize_lossy(i + j + 2) * F::lit(0.5);
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&b| Label::from_bool(b == 1)).collect()
    }

    /// Fraction of (pos, neg) pairs ranked correctly, ties counting half.
    fn brute_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if li.is_positive() && !lj.is_positive() {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_scores() {
        let l = labels(&[1, 0, 1, 0]);
        let m = evaluate_metrics(&[1.0, 0.0, 1.0, 0.0], &l, 0.5).unwrap();
        assert_eq!(
            m,
            MetricTriple {
                accuracy: 1.0,
                auc: 1.0,
                f1: 1.0
            }
        );
    }

    #[test]
    fn confusion_three_one_two_four() {
        // TP=3 FP=1 FN=2 TN=4
        let scores = [0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        let l = labels(&[1, 1, 1, 0, 1, 1, 0, 0, 0, 0]);
        let m = evaluate_metrics::<f64>(&scores, &l, 0.5).unwrap();
        let expected = 2.0 * 0.75 * 0.6 / 1.35;
        assert!((m.f1 - expected).abs() < 1e-15);
        assert!((m.f1 - 0.666_666_666_666_666_6).abs() < 1e-12);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn no_positive_predictions_gives_zero_f1() {
        let l = labels(&[1, 0]);
        let m = evaluate_metrics(&[0.1, 0.2], &l, 0.5).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.auc, 0.0);
    }

    #[test]
    fn single_class_reports_partial_metrics() {
        let l = labels(&[1, 1, 1]);
        match evaluate_metrics::<f64>(&[0.9, 0.2, 0.8], &l, 0.5) {
            Err(MetricsError::AucUndefined { accuracy, f1 }) => {
                assert!((accuracy - 2.0 / 3.0).abs() < 1e-15);
                assert!((f1 - 0.8).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shuffled_labels_auc_near_half() {
        let n = 20_000;
        let mut l: Vec<Label> = (0..n).map(|i| Label::from_bool(i % 2 == 0)).collect();
        let scores: Vec<f64> = l
            .iter()
            .map(|l| if l.is_positive() { 1.0 } else { 0.0 })
            .collect();
        l.shuffle(&mut rng::seeded(5));
        let m = evaluate_metrics::<f64>(&scores, &l, 0.5).unwrap();
        assert!((m.auc - 0.5).abs() < 0.05, "{}", m.auc);
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pair_count(
            data in prop::collection::vec((0u8..5, any::<bool>()), 2..=12)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let l: Vec<Label> = data.iter().map(|(_, b)| Label::from_bool(*b)).collect();
            let pos = l.iter().filter(|x| x.is_positive()).count();
            prop_assume!(pos > 0 && pos < l.len());
            let m = evaluate_metrics::<f64>(&scores, &l, 0.5).unwrap();
            prop_assert!((m.auc - brute_auc(&scores, &l)).abs() < 1e-12);
        }
    }
}
