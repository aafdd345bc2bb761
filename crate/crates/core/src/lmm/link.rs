//! Reference-category multinomial logits for the latent chain and their
//! weighted maximum-likelihood fit.

use nalgebra::{DMatrix, DVector};

use crate::error::ensure;
use crate::linalg::solve_spd;
use crate::Result;

/// Position of destination `to` among the destinations other than `from`.
pub(crate) fn other_index(from: usize, to: usize) -> usize {
    debug_assert_ne!(from, to);
    if to < from {
        to
    } else {
        to - 1
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over `etas` with max subtraction.
fn softmax_in_place(etas: &mut [f64]) {
    let max = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in etas.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in etas.iter_mut() {
        *e /= sum;
    }
}

pub(crate) fn initial_probs_unchecked(beta: &[Vec<f64>], x: &[f64], k: usize) -> Vec<f64> {
    let mut etas = vec![0.0; k];
    for u in 1..k {
        etas[u] = dot(&beta[u - 1], x);
    }
    softmax_in_place(&mut etas);
    etas
}

pub(crate) fn transition_row_unchecked(gamma_from: &[Vec<f64>], from: usize, x: &[f64], k: usize) -> Vec<f64> {
    let mut etas = vec![0.0; k];
    for to in (0..k).filter(|&to| to != from) {
        etas[to] = dot(&gamma_from[other_index(from, to)], x);
    }
    softmax_in_place(&mut etas);
    etas
}

/// Initial distribution for one covariate row `x` (leading 1 included).
/// State 0 is the reference: `log(delta_u / delta_0) = beta[u-1] . x`.
pub fn initial_probs(beta: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
    ensure!(x.iter().all(|v| v.is_finite()), "non-finite covariate row");
    ensure!(
        beta.iter().all(|b| b.len() == x.len()),
        "beta rows and covariate row have different lengths"
    );
    Ok(initial_probs_unchecked(beta, x, beta.len() + 1))
}

/// Transition row out of `from`; persistence is the reference category:
/// `log(tau_{to|from} / tau_{from|from}) = gamma[from][m] . x`.
pub fn transition_row(gamma: &[Vec<Vec<f64>>], from: usize, x: &[f64]) -> Result<Vec<f64>> {
    let k = gamma.len();
    ensure!(from < k, "origin state {from} out of range");
    ensure!(x.iter().all(|v| v.is_finite()), "non-finite covariate row");
    ensure!(
        gamma[from].len() + 1 == k && gamma[from].iter().all(|g| g.len() == x.len()),
        "gamma block dimensions do not match"
    );
    Ok(transition_row_unchecked(&gamma[from], from, x, k))
}

/// Weighted multinomial-logit problem: maximise
/// `sum_i sum_c w[i][c] log p_c(x_i)` where category `reference` has a zero
/// linear predictor.
pub(crate) struct LogitProblem<'a> {
    pub xs: &'a [Vec<f64>],
    pub weights: &'a [Vec<f64>],
    pub categories: usize,
    pub reference: usize,
}

impl LogitProblem<'_> {
    fn dim(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    fn probs(&self, coef: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let mut etas = vec![0.0; self.categories];
        for c in (0..self.categories).filter(|&c| c != self.reference) {
            etas[c] = dot(&coef[other_index(self.reference, c)], x);
        }
        softmax_in_place(&mut etas);
        etas
    }

    pub fn objective(&self, coef: &[Vec<f64>]) -> f64 {
        let mut q = 0.0;
        for (x, w) in self.xs.iter().zip(self.weights) {
            if w.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = self.probs(coef, x);
            for (wc, pc) in w.iter().zip(&p) {
                if *wc > 0.0 {
                    q += wc * pc.ln();
                }
            }
        }
        q
    }

    /// Newton-Raphson with step halving; each accepted step does not lower
    /// the objective. Returns the final objective value.
    pub fn maximise(&self, coef: &mut Vec<Vec<f64>>, max_steps: usize) -> f64 {
        let kc = self.categories - 1;
        let d = self.dim();
        let n_par = kc * d;
        let mut current = self.objective(coef);
        if n_par == 0 {
            return current;
        }
        for _ in 0..max_steps {
            let mut grad = DVector::<f64>::zeros(n_par);
            let mut info = DMatrix::<f64>::zeros(n_par, n_par);
            for (x, w) in self.xs.iter().zip(self.weights) {
                let total: f64 = w.iter().sum();
                if total == 0.0 {
                    continue;
                }
                let p = self.probs(coef, x);
                let others: Vec<usize> = (0..self.categories).filter(|&c| c != self.reference).collect();
                for (a, &ca) in others.iter().enumerate() {
                    let r = w[ca] - total * p[ca];
                    for i in 0..d {
                        grad[a * d + i] += r * x[i];
                    }
                    for (b, &cb) in others.iter().enumerate().skip(a) {
                        let h = total * p[ca] * (if ca == cb { 1.0 } else { 0.0 } - p[cb]);
                        if h == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            let hx = h * x[i];
                            for jx in 0..d {
                                info[(a * d + i, b * d + jx)] += hx * x[jx];
                            }
                        }
                    }
                }
            }
            for a in 0..kc {
                for b in (a + 1)..kc {
                    for i in 0..d {
                        for jx in 0..d {
                            info[(b * d + jx, a * d + i)] = info[(a * d + i, b * d + jx)];
                        }
                    }
                }
            }
            let Some(step) = solve_spd(&info, &grad) else { break };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<Vec<f64>> = (0..kc)
                    .map(|a| (0..d).map(|i| coef[a][i] + scale * step[a * d + i]).collect())
                    .collect();
                let value = self.objective(&trial);
                if value.is_finite() && value >= current {
                    let gain = value - current;
                    *coef = trial;
                    current = value;
                    accepted = gain > 1e-12 * (1.0 + current.abs());
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        current
    }
}
