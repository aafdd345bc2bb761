//! Local and global decoding of latent trajectories and their
//! classification into behavioural profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::lmm::SubjectModel;
use crate::{Error, Result};

/// Latent path with 1-based state labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentPath {
    pub states: Vec<u8>,
}

impl LatentPath {
    /// From 0-based state indices.
    pub fn from_indices(indices: &[usize]) -> Self {
        LatentPath {
            states: indices.iter().map(|&u| (u + 1) as u8).collect(),
        }
    }
}

/// Relative tolerance under which two log scores count as tied.
const TIE_TOL: f64 = 1e-12;

fn tied_or_better(candidate: f64, best: f64) -> bool {
    candidate >= best - TIE_TOL * best.abs().max(1.0)
}

/// Index of the maximum, earliest index on ties.
fn argmax_first(values: &[f64]) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == max).unwrap_or(0)
}

/// Most probable state at each occasion; ties go to the lowest state.
pub fn local_decode(posteriors: &[Vec<f64>]) -> LatentPath {
    LatentPath {
        states: posteriors.iter().map(|row| (argmax_first(row) + 1) as u8).collect(),
    }
}

fn ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log joint probability of a path (0-based states) and the observations.
pub fn path_log_joint(m: &SubjectModel, path: &[usize]) -> f64 {
    let k = m.states;
    let mut lp = ln(m.initial[path[0]]) + ln(m.emissions[0][path[0]]);
    for t in 1..path.len() {
        lp += ln(m.transitions[t - 1][path[t - 1] * k + path[t]]) + ln(m.emissions[t][path[t]]);
    }
    lp
}

/// Most probable latent path, computed in log space. Among paths tied for
/// the maximum the lexicographically smallest is returned: best suffix
/// scores are computed backward, then states are chosen greedily forward,
/// taking the lowest state that still attains the optimum.
pub fn viterbi_decode(m: &SubjectModel) -> Result<(LatentPath, f64)> {
    let k = m.states;
    let t_len = m.emissions.len();
    ensure!(t_len > 0, "cannot decode an empty sequence");
    let log_tr: Vec<Vec<f64>> = m
        .transitions
        .iter()
        .map(|tr| tr.iter().map(|&v| ln(v)).collect())
        .collect();
    let log_em: Vec<Vec<f64>> = m.emissions.iter().map(|e| e.iter().map(|&v| ln(v)).collect()).collect();

    // suffix[t][u]: best log score of occasions t+1.. given state u at t
    let mut suffix = vec![vec![0.0; k]; t_len];
    for t in (0..t_len - 1).rev() {
        for a in 0..k {
            suffix[t][a] = (0..k)
                .map(|b| log_tr[t][a * k + b] + log_em[t + 1][b] + suffix[t + 1][b])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }

    let pick = |scores: Vec<f64>| -> Option<usize> {
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            return None;
        }
        scores.iter().position(|&s| tied_or_better(s, best))
    };
    let zero = || Error::ZeroLikelihood { subject: m.id.clone() };

    let first: Vec<f64> = (0..k).map(|u| ln(m.initial[u]) + log_em[0][u] + suffix[0][u]).collect();
    let mut path = vec![pick(first).ok_or_else(zero)?];
    for t in 1..t_len {
        let a = path[t - 1];
        let scores: Vec<f64> = (0..k)
            .map(|b| log_tr[t - 1][a * k + b] + log_em[t][b] + suffix[t][b])
            .collect();
        path.push(pick(scores).ok_or_else(zero)?);
    }
    let score = path_log_joint(m, &path);
    if score == f64::NEG_INFINITY {
        return Err(zero());
    }
    Ok((LatentPath::from_indices(&path), score))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProfileLabel {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl ProfileLabel {
    pub const ALL: [ProfileLabel; 9] = [
        ProfileLabel::A,
        ProfileLabel::B,
        ProfileLabel::C,
        ProfileLabel::D,
        ProfileLabel::E,
        ProfileLabel::F,
        ProfileLabel::G,
        ProfileLabel::H,
        ProfileLabel::I,
    ];

    pub fn description(self) -> &'static str {
        match self {
            ProfileLabel::A => "constant in state 1",
            ProfileLabel::B => "constant in state 2",
            ProfileLabel::C => "constant in state 3",
            ProfileLabel::D => "constant in state 4",
            ProfileLabel::E => "increase by one level",
            ProfileLabel::F => "increase by two or three levels",
            ProfileLabel::G => "decrease by one level",
            ProfileLabel::H => "decrease by two or three levels",
            ProfileLabel::I => "non-monotone",
        }
    }
}

impl fmt::Display for ProfileLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ProfileLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProfileLabel::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| format!("unknown profile label `{s}`"))
    }
}

/// Classifies a four-state path: constants map to A-D, monotone rises to
/// E (net +1) or F (+2/+3), monotone falls to G (-1) or H (-2/-3), and any
/// path that changes direction to I.
pub fn classify_profile(path: &LatentPath) -> Result<ProfileLabel> {
    let s = &path.states;
    ensure!(!s.is_empty(), "empty path");
    ensure!(
        s.iter().all(|v| (1..=4).contains(v)),
        "path states must lie in 1..=4: {s:?}"
    );
    let first = s[0] as i32;
    let last = *s.last().unwrap() as i32;
    let non_decreasing = s.windows(2).all(|w| w[0] <= w[1]);
    let non_increasing = s.windows(2).all(|w| w[0] >= w[1]);
    Ok(match (non_decreasing, non_increasing) {
        (true, true) => ProfileLabel::ALL[(first - 1) as usize],
        (true, false) if last - first == 1 => ProfileLabel::E,
        (true, false) => ProfileLabel::F,
        (false, true) if first - last == 1 => ProfileLabel::G,
        (false, true) => ProfileLabel::H,
        (false, false) => ProfileLabel::I,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileCount {
    pub label: ProfileLabel,
    pub count: usize,
    pub retained: bool,
}

/// Counts per label (all nine, in order). A label is retained when it has
/// at least `min_count` patients and at least one.
pub fn profile_table(labels: &[ProfileLabel], min_count: usize) -> Result<Vec<ProfileCount>> {
    ensure!(!labels.is_empty(), "profile table needs at least one path");
    Ok(ProfileLabel::ALL
        .into_iter()
        .map(|label| {
            let count = labels.iter().filter(|&&l| l == label).count();
            ProfileCount {
                label,
                count,
                retained: count > 0 && count >= min_count,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Local,
    #[default]
    Global,
}
