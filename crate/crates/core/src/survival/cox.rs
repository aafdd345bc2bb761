//! Cox proportional-hazards regression with Efron's tie correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::linalg::solve_spd;
use crate::{Error, Result};

const Z_975: f64 = 1.959963984540054;
const MAX_ITER: usize = 50;
const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxTerm {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub terms: Vec<CoxTerm>,
    pub loglik: f64,
    pub loglik_null: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

impl CoxFit {
    pub fn term(&self, name: &str) -> Option<&CoxTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Risk-set ordering: time ascending; subjects sharing a time form one block.
struct Prepared {
    /// Centred covariate rows, sorted by time.
    x: Vec<Vec<f64>>,
    events: Vec<bool>,
    /// `(start, end)` index ranges of equal-time blocks.
    blocks: Vec<(usize, usize)>,
}

fn prepare(times: &[f64], events: &[bool], design: &[Vec<f64>], names: &[String]) -> Result<Prepared> {
    let n = times.len();
    ensure!(n > 0, "Cox model needs at least one subject");
    ensure!(
        events.len() == n && design.len() == n,
        "times, events and design must have equal length"
    );
    let p = names.len();
    ensure!(design.iter().all(|r| r.len() == p), "design rows must have {p} columns");
    ensure!(
        times.iter().all(|t| t.is_finite() && *t > 0.0),
        "survival times must be finite and positive"
    );
    ensure!(
        design.iter().flatten().all(|v| v.is_finite()),
        "design contains non-finite values"
    );
    ensure!(events.iter().any(|&e| e), "Cox model needs at least one event");

    let means: Vec<f64> = (0..p)
        .map(|c| design.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = design
        .iter()
        .map(|r| r.iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();

    // Gram-Schmidt on centred columns: a column with (almost) nothing left
    // after projecting out the earlier ones is collinear.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..p {
        let mut col: Vec<f64> = centred.iter().map(|r| r[c]).collect();
        let norm0: f64 = col.iter().map(|v| v * v).sum();
        for q in &basis {
            let proj: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm: f64 = col.iter().map(|v| v * v).sum();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(Error::RankDeficient {
                column: names[c].clone(),
            });
        }
        let inv = 1.0 / norm.sqrt();
        basis.push(col.into_iter().map(|v| v * inv).collect());
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        times[a]
            .total_cmp(&times[b])
            .then(events[b].cmp(&events[a]))
            .then(a.cmp(&b))
    });
    let x: Vec<Vec<f64>> = order.iter().map(|&i| centred[i].clone()).collect();
    let ev: Vec<bool> = order.iter().map(|&i| events[i]).collect();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && times[order[j]] == times[order[i]] {
            j += 1;
        }
        blocks.push((i, j));
        i = j;
    }
    Ok(Prepared { x, events: ev, blocks })
}

/// Efron partial log-likelihood, score and observed information.
fn efron(prep: &Prepared, beta: &[f64], with_derivatives: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = beta.len();
    let eta: Vec<f64> = prep
        .x
        .iter()
        .map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect();
    let risk: Vec<f64> = eta.iter().map(|e| e.exp()).collect();

    let mut loglik = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::<f64>::zeros(p);
    let mut s2 = DMatrix::<f64>::zeros(p, p);

    for &(start, end) in prep.blocks.iter().rev() {
        let mut d0 = 0.0;
        let mut d1 = DVector::<f64>::zeros(p);
        let mut d2 = DMatrix::<f64>::zeros(p, p);
        let mut deaths = 0usize;
        for i in start..end {
            let xi = DVector::from_column_slice(&prep.x[i]);
            let r = risk[i];
            s0 += r;
            if with_derivatives {
                s1 += &xi * r;
                s2 += &xi * xi.transpose() * r;
            }
            if prep.events[i] {
                deaths += 1;
                loglik += eta[i];
                d0 += r;
                if with_derivatives {
                    grad += &xi;
                    d1 += &xi * r;
                    d2 += &xi * xi.transpose() * r;
                }
            }
        }
        for l in 0..deaths {
            let f = l as f64 / deaths as f64;
            let a0 = s0 - f * d0;
            loglik -= a0.ln();
            if with_derivatives {
                let a1 = &s1 - &d1 * f;
                let a2 = &s2 - &d2 * f;
                grad -= &a1 / a0;
                info += a2 / a0 - (&a1 * a1.transpose()) / (a0 * a0);
            }
        }
    }
    (loglik, grad, info)
}

/// Efron partial log-likelihood at `beta` (columns centred internally).
pub fn cox_partial_loglik(
    times: &[f64],
    events: &[bool],
    design: &[Vec<f64>],
    names: &[String],
    beta: &[f64],
) -> Result<f64> {
    let prep = prepare(times, events, design, names)?;
    Ok(efron(&prep, beta, false).0)
}

/// Maximises the Efron partial likelihood by Newton-Raphson with step
/// halving. Stops when the relative log-likelihood change drops below
/// `1e-9`; fails after 50 iterations.
pub fn cox_fit(times: &[f64], events: &[bool], design: &[Vec<f64>], names: &[String]) -> Result<CoxFit> {
    let prep = prepare(times, events, design, names)?;
    let p = names.len();
    let mut beta = vec![0.0; p];
    let (mut loglik, mut grad, mut info) = efron(&prep, &beta, true);
    let loglik_null = loglik;
    let mut trace = vec![loglik];
    let mut iterations = 0;
    let mut converged = p == 0;
    while !converged {
        if iterations == MAX_ITER {
            return Err(Error::NonConvergence { iterations, trace });
        }
        iterations += 1;
        let Some(step) = solve_spd(&info, &grad) else {
            return Err(Error::Computation("Cox information matrix is singular".into()));
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let (ll, g, h) = efron(&prep, &trial, true);
            if ll.is_finite() && ll >= loglik - 1e-12 * loglik.abs() {
                accepted = Some((trial, ll, g, h));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, ll, g, h)) = accepted else {
            // no ascent direction left: at the optimum up to rounding
            break;
        };
        let change = (ll - loglik).abs();
        beta = trial;
        grad = g;
        info = h;
        trace.push(ll);
        converged = change <= REL_TOL * loglik.abs().max(1e-300);
        loglik = ll;
    }

    let cov = info
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Computation("Cox information matrix is singular".into()))?;
    let terms = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let se = cov[(c, c)].max(0.0).sqrt();
            CoxTerm {
                name: name.clone(),
                coef: beta[c],
                se,
                hazard_ratio: beta[c].exp(),
                ci_lower: (beta[c] - Z_975 * se).exp(),
                ci_upper: (beta[c] + Z_975 * se).exp(),
            }
        })
        .collect();
    Ok(CoxFit {
        terms,
        loglik,
        loglik_null,
        iterations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Efron partial log-likelihood for one covariate written directly from
    /// its definition, one risk set at a time.
    fn naive_efron(times: &[f64], events: &[bool], x: &[f64], beta: f64) -> f64 {
        let mut distinct: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut ll = 0.0;
        for t in distinct {
            let risk: f64 = (0..times.len())
                .filter(|&i| times[i] >= t)
                .map(|i| (beta * x[i]).exp())
                .sum();
            let dead: Vec<usize> = (0..times.len()).filter(|&i| times[i] == t && events[i]).collect();
            let dsum: f64 = dead.iter().map(|&i| (beta * x[i]).exp()).sum();
            let d = dead.len() as f64;
            for &i in &dead {
                ll += beta * x[i];
            }
            for l in 0..dead.len() {
                ll -= (risk - l as f64 / d * dsum).ln();
            }
        }
        ll
    }

    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    }

    #[test]
    fn exchangeable_groups_give_zero_coefficient() {
        let times = [1.0, 3.0, 5.0, 1.0, 3.0, 5.0];
        let events = [true, true, false, true, true, false];
        let x: Vec<Vec<f64>> = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0].iter().map(|&v| vec![v]).collect();
        let fit = cox_fit(&times, &events, &x, &["group".into()]).unwrap();
        let xs: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let brute = golden_max(|b| naive_efron(&times, &events, &xs, b), -5.0, 5.0);
        assert!(brute.abs() < 1e-6);
        assert!(fit.terms[0].coef.abs() < 1e-8);
        assert!((fit.terms[0].hazard_ratio - 1.0).abs() < 1e-8);
    }

    #[test]
    fn matches_brute_force_maximiser_with_ties() {
        let times = [1.0, 2.0, 2.0, 3.0, 4.0, 4.0];
        let events = [true, true, true, false, true, true];
        let xs = [0.5, 1.2, -0.3, 0.8, 2.0, -1.0];
        let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let fit = cox_fit(&times, &events, &x, &["x".into()]).unwrap();
        let brute = golden_max(|b| naive_efron(&times, &events, &xs, b), -10.0, 10.0);
        assert!(
            (fit.terms[0].coef - brute).abs() < 1e-6,
            "{} vs {brute}",
            fit.terms[0].coef
        );
        let ll = naive_efron(&times, &events, &xs, fit.terms[0].coef);
        assert!((fit.loglik - ll).abs() < 1e-10);
        assert!(fit.loglik >= fit.loglik_null);
    }

    #[test]
    fn constant_column_is_rank_deficient() {
        let times = [1.0, 2.0, 3.0];
        let events = [true, true, false];
        let x = vec![vec![1.0, 2.0], vec![0.0, 2.0], vec![1.0, 2.0]];
        match cox_fit(&times, &events, &x, &["a".into(), "b".into()]) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "b"),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let x = vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]];
        match cox_fit(&times, &events, &x, &["a".into(), "b".into()]) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "b"),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn separated_data_fails_to_converge() {
        // every event has x = 1, every survivor x = 0: the MLE is infinite
        let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let events = [true, true, true, false, false, false];
        let x: Vec<Vec<f64>> = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0].iter().map(|&v| vec![v]).collect();
        let res = cox_fit(&times, &events, &x, &["x".into()]);
        match res {
            Err(Error::NonConvergence { trace, .. }) => assert!(!trace.is_empty()),
            Ok(fit) => assert!(fit.terms[0].coef > 5.0),
            Err(other) => panic!("unexpected {other:?}"),
        }
    }
}
