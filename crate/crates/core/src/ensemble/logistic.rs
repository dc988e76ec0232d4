use serde::{Deserialize, Serialize};

use super::{check_training, EnsembleError, HyperParams};
use crate::dataset::FeatureMatrix;
use crate::scalar::{sigmoid, Scalar};

const MAX_ITERS: usize = 20_000;

/// L2-regularized logistic regression on standardized features.
/// The intercept is not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel<F> {
    pub weights: Vec<F>,
    pub intercept: F,
    pub means: Vec<F>,
    pub scales: Vec<F>,
    pub feature_order: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
}

impl<F: Scalar> LogisticModel<F> {
    pub fn margin_row(&self, row: &[F]) -> F {
        let z: F = row
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .zip(&self.weights)
            .map(|(((&x, &m), &s), &w)| w * (x - m) / s)
            .sum();
        self.intercept + z
    }

    pub fn predict_row(&self, row: &[F]) -> F {
        sigmoid(self.margin_row(row))
    }
}

struct Problem<F> {
    z: Vec<Vec<F>>,
    y: Vec<F>,
    lambda: F,
}

impl<F: Scalar> Problem<F> {
    /// Objective and gradient at `theta = [intercept, weights...]`.
    fn eval(&self, theta: &[F]) -> (F, Vec<F>) {
        let n = F::from_usize_lossy(self.y.len());
        let mut grad = vec![F::zero(); theta.len()];
        let mut loss = F::zero();
        for (row, &t) in self.z.iter().zip(&self.y) {
            let m = theta[0] + row.iter().zip(&theta[1..]).map(|(&x, &w)| x * w).sum::<F>();
            let softplus = if m > F::zero() {
                m + (-m).exp().ln_1p()
            } else {
                m.exp().ln_1p()
            };
            loss = loss + softplus - t * m;
            let r = sigmoid(m) - t;
            grad[0] = grad[0] + r;
            for (g, &x) in grad[1..].iter_mut().zip(row) {
                *g = *g + r * x;
            }
        }
        let half = F::lit(0.5);
        let penalty: F = theta[1..].iter().map(|&w| w * w).sum::<F>() * half * self.lambda / n;
        grad.iter_mut().for_each(|g| *g = *g / n);
        for (g, &w) in grad[1..].iter_mut().zip(&theta[1..]) {
            *g = *g + self.lambda * w / n;
        }
        (loss / n + penalty, grad)
    }
}

fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Gradient descent with a backtracking (Armijo) step until the gradient
/// norm falls below tolerance.
pub fn fit_logistic<F: Scalar>(
    data: &FeatureMatrix<F>,
    hp: &HyperParams,
) -> Result<LogisticModel<F>, EnsembleError> {
    hp.validate()?;
    check_training(data)?;
    let n = data.n_rows();
    let m = data.n_features();
    let nf = F::from_usize_lossy(n);
    let mut means = vec![F::zero(); m];
    let mut scales = vec![F::one(); m];
    for j in 0..m {
        let mean = data.column(j).sum::<F>() / nf;
        let var = data.column(j).map(|v| (v - mean) * (v - mean)).sum::<F>() / nf;
        means[j] = mean;
        if var > F::zero() {
            scales[j] = var.sqrt();
        }
    }
    let z: Vec<Vec<F>> = data
        .rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&means)
                .zip(&scales)
                .map(|((&x, &mu), &s)| (x - mu) / s)
                .collect()
        })
        .collect();
    let problem = Problem {
        z,
        y: data.targets(),
        lambda: F::lit(hp.l2_lambda),
    };
    let tol = F::lit(1e-6).max(F::epsilon().sqrt());
    let mut theta = vec![F::zero(); m + 1];
    let (mut f, mut g) = problem.eval(&theta);
    let mut step = F::one();
    let mut iterations = 0;
    let mut converged = false;
    let armijo = F::lit(1e-4);
    while iterations < MAX_ITERS {
        let gn = norm(&g);
        if gn < tol {
            converged = true;
            break;
        }
        iterations += 1;
        step = step * F::lit(2.0);
        loop {
            let trial: Vec<F> = theta.iter().zip(&g).map(|(&t, &d)| t - step * d).collect();
            let (ft, gt) = problem.eval(&trial);
            if ft <= f - armijo * step * gn * gn || step < F::epsilon() {
                theta = trial;
                f = ft;
                g = gt;
                break;
            }
            step = step * F::lit(0.5);
        }
    }
    Ok(LogisticModel {
        intercept: theta[0],
        weights: theta[1..].to_vec(),
        means,
        scales,
        feature_order: data.names.clone(),
        iterations,
        converged,
    })
}
