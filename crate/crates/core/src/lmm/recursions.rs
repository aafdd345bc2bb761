//! Scaled forward-backward recursions.

use crate::{Error, Result};

/// Per-subject chain and emission weights, ready for the recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectModel {
    pub id: String,
    pub states: usize,
    pub initial: Vec<f64>,
    /// `transitions[t-1]` is the row-major `k * k` matrix into occasion `t`.
    pub transitions: Vec<Vec<f64>>,
    /// `emissions[t][u]`: probability of the observed responses at `t` given `u`.
    pub emissions: Vec<Vec<f64>>,
}

/// Product of `phi[j][y_j][u]` over observed channels; missing channels
/// (`None`) contribute a factor of one.
pub fn emission_weight(phi: &[Vec<Vec<f64>>], y_at_t: &[Option<u8>], state: usize) -> f64 {
    phi.iter()
        .zip(y_at_t)
        .filter_map(|(ch, y)| y.map(|y| ch[y as usize][state]))
        .product()
}

pub(crate) fn emission_at(phi: &[Vec<Vec<f64>>], responses: &[Option<Vec<u8>>], t: usize, state: usize) -> f64 {
    phi.iter()
        .zip(responses)
        .filter_map(|(ch, ys)| ys.as_ref().map(|ys| ch[ys[t] as usize][state]))
        .product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub loglik: f64,
    /// `states[t][u]` = P(U_t = u | data).
    pub states: Vec<Vec<f64>>,
    /// `pairwise[t-1][a * k + b]` = P(U_{t-1} = a, U_t = b | data).
    pub pairwise: Vec<Vec<f64>>,
}

/// Forward-backward with per-occasion normalisation. The log-likelihood is
/// the sum of the logs of the normalisers.
pub fn forward_backward(m: &SubjectModel) -> Result<Posteriors> {
    let k = m.states;
    let t_len = m.emissions.len();
    let zero = || Error::ZeroLikelihood { subject: m.id.clone() };

    // alpha and beta are stored flat, `[t * k + u]`
    let mut alpha = vec![0.0; t_len * k];
    let mut scale = vec![0.0; t_len];
    for u in 0..k {
        alpha[u] = m.initial[u] * m.emissions[0][u];
    }
    for t in 0..t_len {
        if t > 0 {
            let tr = &m.transitions[t - 1];
            let (prev, cur) = alpha.split_at_mut(t * k);
            let prev = &prev[(t - 1) * k..];
            for b in 0..k {
                let mut acc = 0.0;
                for a in 0..k {
                    acc += prev[a] * tr[a * k + b];
                }
                cur[b] = acc * m.emissions[t][b];
            }
        }
        let row = &mut alpha[t * k..(t + 1) * k];
        let c: f64 = row.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(zero());
        }
        scale[t] = c;
        row.iter_mut().for_each(|v| *v /= c);
    }

    let mut beta = vec![1.0; t_len * k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let tr = &m.transitions[t];
        let em = &m.emissions[t + 1];
        let (cur, next) = beta.split_at_mut((t + 1) * k);
        let next = &next[..k];
        for a in 0..k {
            let mut acc = 0.0;
            for b in 0..k {
                acc += tr[a * k + b] * em[b] * next[b];
            }
            cur[t * k + a] = acc / scale[t + 1];
        }
    }

    let states = (0..t_len)
        .map(|t| {
            let mut row: Vec<f64> = (0..k).map(|u| alpha[t * k + u] * beta[t * k + u]).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect();
    let pairwise = (1..t_len)
        .map(|t| {
            let tr = &m.transitions[t - 1];
            let em = &m.emissions[t];
            let mut xi = vec![0.0; k * k];
            for a in 0..k {
                let fa = alpha[(t - 1) * k + a] / scale[t];
                for b in 0..k {
                    xi[a * k + b] = fa * tr[a * k + b] * em[b] * beta[t * k + b];
                }
            }
            let s: f64 = xi.iter().sum();
            xi.iter_mut().for_each(|v| *v /= s);
            xi
        })
        .collect();
    let loglik = scale.iter().map(|c| c.ln()).sum();
    Ok(Posteriors {
        loglik,
        states,
        pairwise,
    })
}
