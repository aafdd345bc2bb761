//! Multivariate latent Markov model for categorical panels.
//!
//! Each subject carries `J` categorical response channels observed on `T`
//! occasions. A first-order hidden chain over `k` states drives the
//! responses; given the state, channels are independent with probabilities
//! `phi[j][y][u]`. Initial and transition probabilities are either free
//! (with one transition matrix per occasion) or multinomial logits of
//! subject covariates. A channel can be missing for a whole subject and is
//! then marginalised out.

mod em;
mod link;
mod recursions;
mod selection;
mod serialize;
mod simulate;

use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::{Error, Result};

pub use em::{em_fit, EmOptions, FitResult};
pub use link::{initial_probs, transition_row};
pub use recursions::{emission_weight, forward_backward, Posteriors, SubjectModel};
pub use selection::{model_selection, write_selection_table, SelectionOptions, SelectionRow, SelectionTable};
pub use serialize::{read_model, write_model, ModelDocument, MODEL_FORMAT_VERSION};
pub use simulate::{sample_categorical, sample_latent_path, simulate_responses};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionForm {
    /// Free initial vector and a separate transition matrix per occasion.
    UnrestrictedTimeVarying,
    /// Reference-category logits; one set of coefficients for all occasions.
    LogitHomogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of latent states `k`.
    pub states: usize,
    pub drugs: Vec<String>,
    /// Number of response categories of each channel.
    pub categories: Vec<usize>,
    /// Panel length `T`.
    pub occasions: usize,
    #[serde(default)]
    pub init_covariates: Vec<String>,
    #[serde(default)]
    pub trans_covariates: Vec<String>,
    pub transition_form: TransitionForm,
}

impl ModelSpec {
    pub fn new(
        states: usize,
        drugs: Vec<String>,
        categories: Vec<usize>,
        occasions: usize,
        transition_form: TransitionForm,
    ) -> Self {
        ModelSpec {
            states,
            drugs,
            categories,
            occasions,
            init_covariates: Vec::new(),
            trans_covariates: Vec::new(),
            transition_form,
        }
    }

    /// Same covariates on both initial and transition probabilities.
    pub fn with_covariates(mut self, covariates: &[String]) -> Self {
        self.init_covariates = covariates.to_vec();
        self.trans_covariates = covariates.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.states >= 1, "number of latent states must be at least 1");
        ensure!(!self.drugs.is_empty(), "model needs at least one response channel");
        ensure!(
            self.drugs.len() == self.categories.len(),
            "{} channels but {} category counts",
            self.drugs.len(),
            self.categories.len()
        );
        ensure!(
            self.categories.iter().all(|&c| (2..=u8::MAX as usize).contains(&c)),
            "every channel needs between 2 and 255 categories"
        );
        ensure!(self.occasions >= 1, "panel needs at least one occasion");
        if self.transition_form == TransitionForm::UnrestrictedTimeVarying {
            ensure!(
                self.init_covariates.is_empty() && self.trans_covariates.is_empty(),
                "the unrestricted time-varying form takes no covariates"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum LatentParameters {
    Unrestricted {
        /// Initial distribution, length `k`.
        initial: Vec<f64>,
        /// `transitions[t-1][from][to]` for the move into occasion `t`.
        transitions: Vec<Vec<Vec<f64>>>,
    },
    Logit {
        /// `beta[u-1]`: coefficients of state `u` against state 0, leading intercept.
        beta: Vec<Vec<f64>>,
        /// `gamma[from][m]`: coefficients of the `m`-th destination other
        /// than `from` (ascending order) against staying in `from`.
        gamma: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmParameters {
    /// `phi[j][y][u]`: probability of category `y` on channel `j` in state `u`.
    pub phi: Vec<Vec<Vec<f64>>>,
    pub latent: LatentParameters,
}

/// A [`ModelSpec`] together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmModel {
    pub spec: ModelSpec,
    pub params: LmmParameters,
}

/// One subject of a [`DataPanel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// `responses[j]` holds `T` categories, or `None` when the whole
    /// channel is missing.
    pub responses: Vec<Option<Vec<u8>>>,
    /// Covariates for the initial probabilities, indexed like
    /// [`DataPanel::covariate_names`].
    pub baseline: Vec<f64>,
    /// `time_varying[t-1]` holds covariates for the move into occasion `t`.
    pub time_varying: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPanel {
    pub drugs: Vec<String>,
    pub categories: Vec<usize>,
    pub occasions: usize,
    pub covariate_names: Vec<String>,
    pub subjects: Vec<Subject>,
}

impl DataPanel {
    pub fn validate(&self) -> Result<()> {
        let n_cov = self.covariate_names.len();
        for s in &self.subjects {
            ensure!(
                s.responses.len() == self.drugs.len(),
                "subject `{}` has {} channels, expected {}",
                s.id,
                s.responses.len(),
                self.drugs.len()
            );
            for (j, ch) in s.responses.iter().enumerate() {
                if let Some(ys) = ch {
                    ensure!(
                        ys.len() == self.occasions,
                        "subject `{}` channel {} has {} occasions, expected {}",
                        s.id,
                        j,
                        ys.len(),
                        self.occasions
                    );
                    ensure!(
                        ys.iter().all(|&y| (y as usize) < self.categories[j]),
                        "subject `{}` channel {} has a category outside 0..{}",
                        s.id,
                        j,
                        self.categories[j]
                    );
                }
            }
            ensure!(
                s.baseline.len() == n_cov,
                "subject `{}`: baseline covariate count mismatch",
                s.id
            );
            ensure!(
                s.time_varying.len() == self.occasions.saturating_sub(1)
                    && s.time_varying.iter().all(|r| r.len() == n_cov),
                "subject `{}`: time-varying covariate shape mismatch",
                s.id
            );
            ensure!(
                s.baseline
                    .iter()
                    .chain(s.time_varying.iter().flatten())
                    .all(|v| v.is_finite()),
                "subject `{}` has non-finite covariates",
                s.id
            );
        }
        Ok(())
    }

    /// Checks that the panel has the shape the model expects.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.drugs != spec.drugs || self.categories != spec.categories || self.occasions != spec.occasions {
            return Err(Error::Contract(format!(
                "data shape (channels {:?}, categories {:?}, T = {}) does not match model (channels {:?}, categories {:?}, T = {})",
                self.drugs, self.categories, self.occasions, spec.drugs, spec.categories, spec.occasions
            )));
        }
        Columns::resolve(spec, self).map(|_| ())
    }
}

/// Positions of a model's covariates inside a panel's covariate list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Columns {
    pub init: Vec<usize>,
    pub trans: Vec<usize>,
}

impl Columns {
    pub fn resolve(spec: &ModelSpec, panel: &DataPanel) -> Result<Columns> {
        let find = |name: &String| {
            panel
                .covariate_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Contract(format!("covariate `{name}` is not available in the data")))
        };
        Ok(Columns {
            init: spec.init_covariates.iter().map(find).collect::<Result<_>>()?,
            trans: spec.trans_covariates.iter().map(find).collect::<Result<_>>()?,
        })
    }

    pub(crate) fn init_row(&self, subject: &Subject) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.init.iter().map(|&c| subject.baseline[c]))
            .collect()
    }

    pub(crate) fn trans_row(&self, subject: &Subject, t: usize) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.trans.iter().map(|&c| subject.time_varying[t - 1][c]))
            .collect()
    }
}

/// Number of free parameters of a [`ModelSpec`].
pub fn count_free_params(spec: &ModelSpec) -> usize {
    let k = spec.states;
    let measurement: usize = spec.categories.iter().map(|c| c - 1).sum::<usize>() * k;
    let latent = match spec.transition_form {
        TransitionForm::UnrestrictedTimeVarying => (k - 1) + spec.occasions.saturating_sub(1) * k * (k - 1),
        TransitionForm::LogitHomogeneous => {
            (k - 1) * (1 + spec.init_covariates.len()) + k * (k - 1) * (1 + spec.trans_covariates.len())
        }
    };
    measurement + latent
}

/// `(AIC, BIC)` for a maximised log-likelihood, `g` free parameters and `n`
/// subjects.
pub fn information_criteria(loglik: f64, free_params: usize, n: usize) -> Result<(f64, f64)> {
    ensure!(n >= 1, "information criteria need n >= 1");
    let g = free_params as f64;
    Ok((-2.0 * loglik + 2.0 * g, -2.0 * loglik + g * (n as f64).ln()))
}

impl LmmParameters {
    pub fn states(&self) -> usize {
        self.phi.first().and_then(|c| c.first()).map_or(0, |r| r.len())
    }

    /// Expected adherence score `sum_j sum_y y * phi[j][y][u]` per state.
    pub fn expected_scores(&self) -> Vec<f64> {
        (0..self.states())
            .map(|u| {
                self.phi
                    .iter()
                    .map(|ch| ch.iter().enumerate().map(|(y, row)| y as f64 * row[u]).sum::<f64>())
                    .sum()
            })
            .collect()
    }

    /// Relabels states: new state `v` is old state `order[v]`.
    pub fn permute_states(&self, order: &[usize]) -> LmmParameters {
        let k = order.len();
        let phi = self
            .phi
            .iter()
            .map(|ch| ch.iter().map(|row| order.iter().map(|&o| row[o]).collect()).collect())
            .collect();
        let latent = match &self.latent {
            LatentParameters::Unrestricted { initial, transitions } => LatentParameters::Unrestricted {
                initial: order.iter().map(|&o| initial[o]).collect(),
                transitions: transitions
                    .iter()
                    .map(|m| {
                        order
                            .iter()
                            .map(|&a| order.iter().map(|&b| m[a][b]).collect())
                            .collect()
                    })
                    .collect(),
            },
            LatentParameters::Logit { beta, gamma } => {
                let d = beta
                    .first()
                    .map_or_else(|| gamma.first().and_then(|g| g.first()).map_or(1, Vec::len), Vec::len);
                let full_beta = |u: usize| if u == 0 { vec![0.0; d] } else { beta[u - 1].clone() };
                let base = full_beta(order[0]);
                let new_beta = (1..k)
                    .map(|v| full_beta(order[v]).iter().zip(&base).map(|(a, b)| a - b).collect())
                    .collect();
                let full_gamma = |from: usize, to: usize| -> Vec<f64> {
                    if from == to {
                        vec![0.0; d]
                    } else {
                        gamma[from][link::other_index(from, to)].clone()
                    }
                };
                let new_gamma = (0..k)
                    .map(|v| {
                        (0..k)
                            .filter(|&w| w != v)
                            .map(|w| full_gamma(order[v], order[w]))
                            .collect()
                    })
                    .collect();
                LatentParameters::Logit {
                    beta: new_beta,
                    gamma: new_gamma,
                }
            }
        };
        LmmParameters { phi, latent }
    }

    /// Orders states by ascending expected adherence score.
    pub fn canonical_order(&self) -> Vec<usize> {
        let scores = self.expected_scores();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        order
    }
}

impl LmModel {
    pub fn new(spec: ModelSpec, params: LmmParameters) -> Result<Self> {
        let model = LmModel { spec, params };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.spec;
        spec.validate()?;
        let k = spec.states;
        let p = &self.params;
        ensure!(
            p.phi.len() == spec.drugs.len(),
            "phi has {} channels, expected {}",
            p.phi.len(),
            spec.drugs.len()
        );
        for (j, ch) in p.phi.iter().enumerate() {
            ensure!(
                ch.len() == spec.categories[j],
                "phi channel {j} has {} categories",
                ch.len()
            );
            ensure!(
                ch.iter().all(|r| r.len() == k),
                "phi channel {j} has rows of the wrong length"
            );
            for u in 0..k {
                let col: Vec<f64> = ch.iter().map(|r| r[u]).collect();
                check_simplex(&col, &format!("phi channel {j} state {}", u + 1))?;
            }
        }
        match (&p.latent, spec.transition_form) {
            (LatentParameters::Unrestricted { initial, transitions }, TransitionForm::UnrestrictedTimeVarying) => {
                ensure!(
                    initial.len() == k,
                    "initial vector has length {}, expected {k}",
                    initial.len()
                );
                check_simplex(initial, "initial probabilities")?;
                ensure!(
                    transitions.len() == spec.occasions - 1,
                    "{} transition matrices, expected {}",
                    transitions.len(),
                    spec.occasions - 1
                );
                for (t, m) in transitions.iter().enumerate() {
                    ensure!(m.len() == k, "transition matrix {} has {} rows", t + 1, m.len());
                    for (r, row) in m.iter().enumerate() {
                        ensure!(
                            row.len() == k,
                            "transition matrix {} row {} has wrong length",
                            t + 1,
                            r + 1
                        );
                        check_simplex(row, &format!("transition matrix {} row {}", t + 1, r + 1))?;
                    }
                }
            }
            (LatentParameters::Logit { beta, gamma }, TransitionForm::LogitHomogeneous) => {
                let di = 1 + spec.init_covariates.len();
                let dt = 1 + spec.trans_covariates.len();
                ensure!(beta.len() == k - 1, "beta has {} rows, expected {}", beta.len(), k - 1);
                ensure!(beta.iter().all(|r| r.len() == di), "beta rows must have length {di}");
                ensure!(gamma.len() == k, "gamma has {} blocks, expected {k}", gamma.len());
                ensure!(
                    gamma
                        .iter()
                        .all(|b| b.len() == k - 1 && b.iter().all(|r| r.len() == dt)),
                    "gamma blocks must be {} x {dt}",
                    k - 1
                );
                ensure!(
                    beta.iter()
                        .flatten()
                        .chain(gamma.iter().flatten().flatten())
                        .all(|v| v.is_finite()),
                    "logit coefficients must be finite"
                );
            }
            _ => {
                return Err(Error::Contract(
                    "latent parameters do not match the transition form".into(),
                ))
            }
        }
        Ok(())
    }

    /// Initial distribution and transition matrices (row-major `k * k`) of
    /// one subject.
    pub fn latent_chain(&self, cols: &Columns, subject: &Subject) -> (Vec<f64>, Vec<Vec<f64>>) {
        let k = self.spec.states;
        let t_len = self.spec.occasions;
        match &self.params.latent {
            LatentParameters::Unrestricted { initial, transitions } => (
                initial.clone(),
                transitions
                    .iter()
                    .map(|m| m.iter().flatten().copied().collect())
                    .collect(),
            ),
            LatentParameters::Logit { beta, gamma } => {
                let initial = link::initial_probs_unchecked(beta, &cols.init_row(subject), k);
                let trans = (1..t_len)
                    .map(|t| {
                        let x = cols.trans_row(subject, t);
                        let mut m = Vec::with_capacity(k * k);
                        for from in 0..k {
                            m.extend(link::transition_row_unchecked(&gamma[from], from, &x, k));
                        }
                        m
                    })
                    .collect();
                (initial, trans)
            }
        }
    }

    pub fn subject_model(&self, cols: &Columns, subject: &Subject) -> SubjectModel {
        let (initial, transitions) = self.latent_chain(cols, subject);
        self.subject_model_with_chain(initial, transitions, subject)
    }

    /// Like [`LmModel::subject_model`] with a precomputed chain, for models
    /// whose chain is the same for every subject.
    pub(crate) fn subject_model_with_chain(
        &self,
        initial: Vec<f64>,
        transitions: Vec<Vec<f64>>,
        subject: &Subject,
    ) -> SubjectModel {
        let k = self.spec.states;
        let emissions = (0..self.spec.occasions)
            .map(|t| {
                (0..k)
                    .map(|u| recursions::emission_at(&self.params.phi, &subject.responses, t, u))
                    .collect()
            })
            .collect();
        SubjectModel {
            id: subject.id.clone(),
            states: k,
            initial,
            transitions,
            emissions,
        }
    }

    /// Total log-likelihood of a panel.
    pub fn loglik(&self, panel: &DataPanel) -> Result<f64> {
        use rayon::prelude::*;
        panel.check_against(&self.spec)?;
        let cols = Columns::resolve(&self.spec, panel)?;
        let per_subject: Vec<f64> = panel
            .subjects
            .par_iter()
            .map(|s| forward_backward(&self.subject_model(&cols, s)).map(|p| p.loglik))
            .collect::<Result<_>>()?;
        Ok(per_subject.iter().sum())
    }

    /// Canonically ordered copy of the model.
    pub fn canonical(&self) -> LmModel {
        let order = self.params.canonical_order();
        LmModel {
            spec: self.spec.clone(),
            params: self.params.permute_states(&order),
        }
    }
}

/// Average transition matrix over subjects and occasions `2..=T`.
pub fn mean_transition_matrix(model: &LmModel, panel: &DataPanel) -> Result<Vec<Vec<f64>>> {
    panel.check_against(&model.spec)?;
    let k = model.spec.states;
    let cols = Columns::resolve(&model.spec, panel)?;
    let mut acc = vec![0.0; k * k];
    let mut count = 0usize;
    for s in &panel.subjects {
        let (_, trans) = model.latent_chain(&cols, s);
        for m in &trans {
            for (a, v) in acc.iter_mut().zip(m) {
                *a += v;
            }
            count += 1;
        }
    }
    ensure!(count > 0, "no transitions to average");
    Ok(acc
        .chunks(k)
        .map(|r| r.iter().map(|v| v / count as f64).collect())
        .collect())
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    ensure!(
        v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)),
        "{what}: entries must lie in [0, 1]"
    );
    let sum: f64 = v.iter().sum();
    ensure!((sum - 1.0).abs() < 1e-8, "{what}: entries sum to {sum}, expected 1");
    Ok(())
}
