//! L2-regularized logistic regression fitted by full-batch gradient descent
//! with Armijo backtracking. Shared by the propensity model and the scorer.
//!
//! Objective: mean cross-entropy + (λ/2)‖w‖², bias unregularized.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams { l2_lambda: 1.0, max_iter: 3000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub gradient_norm: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn margins(&self, w: &Array1<f64>, b: f64) -> Array1<f64> {
        self.x.dot(w) + b
    }

    fn loss_at(&self, w: &Array1<f64>, z: &Array1<f64>) -> f64 {
        let n = self.y.len() as f64;
        // per-sample CE = softplus(z) - y z
        let ce: f64 = z.iter().zip(self.y.iter()).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / n;
        ce + 0.5 * self.lambda * w.dot(w)
    }

    fn gradient(&self, w: &Array1<f64>, z: &Array1<f64>) -> (Array1<f64>, f64) {
        let n = self.y.len() as f64;
        let resid: Array1<f64> = z.iter().zip(self.y.iter()).map(|(&z, &y)| sigmoid(z) - y).collect();
        let gw = self.x.t().dot(&resid) / n + w * self.lambda;
        let gb = resid.sum() / n;
        (gw, gb)
    }
}

/// Fit on rows of `x` against labels in {0, 1}. Caller checks both classes are present.
pub fn fit_logistic(x: ArrayView2<f64>, y: ArrayView1<f64>, params: &LogisticParams) -> LogisticFit {
    assert_eq!(x.nrows(), y.len(), "one label per row");
    let problem = Problem { x, y, lambda: params.l2_lambda };
    let mut w = Array1::<f64>::zeros(x.ncols());
    // Start the bias at the prior log-odds; it is the optimum when w = 0.
    let prior = y.mean().unwrap_or(0.5).clamp(1e-6, 1.0 - 1e-6);
    let mut b = (prior / (1.0 - prior)).ln();
    let mut z = problem.margins(&w, b);
    let mut loss = problem.loss_at(&w, &z);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;

    while iterations < params.max_iter {
        let (gw, gb) = problem.gradient(&w, &z);
        let g2 = gw.dot(&gw) + gb * gb;
        grad_norm = g2.sqrt();
        if grad_norm <= params.tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Armijo backtracking, starting from twice the last accepted step.
        step *= 2.0;
        loop {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let z_new = problem.margins(&w_new, b_new);
            let loss_new = problem.loss_at(&w_new, &z_new);
            if loss_new <= loss - 1e-4 * step * g2 || step < 1e-20 {
                w = w_new;
                b = b_new;
                z = z_new;
                loss = loss_new;
                break;
            }
            step *= 0.5;
        }
    }
    if !converged {
        let (gw, gb) = problem.gradient(&w, &z);
        grad_norm = (gw.dot(&gw) + gb * gb).sqrt();
        converged = grad_norm <= params.tol;
    }

    LogisticFit {
        weights: w.to_vec(),
        bias: b,
        iterations_used: iterations,
        converged,
        final_loss: loss,
        gradient_norm: grad_norm,
    }
}

pub fn predict_proba(weights: &[f64], bias: f64, row: &[f64]) -> f64 {
    let z: f64 = weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + bias;
    sigmoid(z)
}
