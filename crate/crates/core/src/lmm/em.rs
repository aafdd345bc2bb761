//! Expectation-maximisation for the latent Markov model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::link::LogitProblem;
use super::{
    count_free_params, forward_backward, information_criteria, Columns, DataPanel, LatentParameters, LmModel,
    LmmParameters, ModelSpec, Posteriors, TransitionForm,
};
use crate::{Error, Result};

/// Lower bound applied to emission probabilities after each M-step.
pub const PHI_FLOOR: f64 = 1e-10;
/// Newton iterations per logit M-step.
const NEWTON_STEPS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Convergence threshold on the relative log-likelihood change.
    pub tol: f64,
    pub n_random_starts: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 500,
            tol: 1e-8,
            n_random_starts: 9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted model, states in canonical order, coefficients on the raw
    /// covariate scale.
    pub model: LmModel,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub free_params: usize,
    pub aic: f64,
    pub bic: f64,
    /// 0 for the deterministic start, `1..` for random starts.
    pub start_id: usize,
    pub n_subjects: usize,
}

impl FitResult {
    /// Whether every EM step kept the log-likelihood from dropping by more
    /// than `slack * max(1, |loglik|)`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.loglik_trace
            .windows(2)
            .all(|w| w[1] >= w[0] - slack * w[0].abs().max(1.0))
    }
}

/// Centering and scaling of the covariate columns a model uses.
#[derive(Debug, Clone)]
struct Standardizer {
    init: Vec<(f64, f64)>,
    trans: Vec<(f64, f64)>,
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    fn fit(cols: &Columns, panel: &DataPanel) -> Self {
        let init = cols
            .init
            .iter()
            .map(|&c| mean_sd(panel.subjects.iter().map(|s| s.baseline[c])))
            .collect();
        let trans = cols
            .trans
            .iter()
            .map(|&c| {
                mean_sd(
                    panel
                        .subjects
                        .iter()
                        .flat_map(|s| s.time_varying.iter().map(move |r| r[c])),
                )
            })
            .collect();
        Standardizer { init, trans }
    }

    fn apply(&self, cols: &Columns, panel: &DataPanel) -> DataPanel {
        let mut out = panel.clone();
        for s in &mut out.subjects {
            for (&c, &(m, sd)) in cols.init.iter().zip(&self.init) {
                s.baseline[c] = (s.baseline[c] - m) / sd;
            }
            for row in &mut s.time_varying {
                for (&c, &(m, sd)) in cols.trans.iter().zip(&self.trans) {
                    row[c] = (row[c] - m) / sd;
                }
            }
        }
        out
    }

    fn unscale(coef: &[f64], stats: &[(f64, f64)]) -> Vec<f64> {
        let mut out = coef.to_vec();
        for (i, &(m, sd)) in stats.iter().enumerate() {
            out[i + 1] = coef[i + 1] / sd;
            out[0] -= coef[i + 1] * m / sd;
        }
        out
    }

    fn to_raw(&self, params: &LmmParameters) -> LmmParameters {
        let latent = match &params.latent {
            LatentParameters::Logit { beta, gamma } => LatentParameters::Logit {
                beta: beta.iter().map(|b| Self::unscale(b, &self.init)).collect(),
                gamma: gamma
                    .iter()
                    .map(|block| block.iter().map(|g| Self::unscale(g, &self.trans)).collect())
                    .collect(),
            },
            other => other.clone(),
        };
        LmmParameters {
            phi: params.phi.clone(),
            latent,
        }
    }
}

/// Distinct covariate rows of the logit M-steps. Subjects sharing a row
/// pool their posterior weights, so the Newton iterations run over the
/// distinct rows only.
struct Design {
    init_rows: Vec<Vec<f64>>,
    /// Distinct-row index of each subject.
    init_index: Vec<usize>,
    trans_rows: Vec<Vec<f64>>,
    /// Distinct-row index of each `(subject, t)` pair, subject-major.
    trans_index: Vec<usize>,
}

fn distinct_rows(rows: impl Iterator<Item = Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique = Vec::new();
    let index = rows
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            *seen.entry(key).or_insert_with(|| {
                unique.push(r);
                unique.len() - 1
            })
        })
        .collect();
    (unique, index)
}

impl Design {
    fn new(cols: &Columns, panel: &DataPanel) -> Self {
        let (init_rows, init_index) = distinct_rows(panel.subjects.iter().map(|s| cols.init_row(s)));
        let (trans_rows, trans_index) = distinct_rows(
            panel
                .subjects
                .iter()
                .flat_map(|s| (1..panel.occasions).map(move |t| cols.trans_row(s, t))),
        );
        Design {
            init_rows,
            init_index,
            trans_rows,
            trans_index,
        }
    }
}

fn e_step(model: &LmModel, cols: &Columns, panel: &DataPanel) -> Result<(f64, Vec<Posteriors>)> {
    let shared = (cols.init.is_empty() && cols.trans.is_empty())
        .then(|| panel.subjects.first().map(|s| model.latent_chain(cols, s)))
        .flatten();
    let posts: Vec<Posteriors> = panel
        .subjects
        .par_iter()
        .map(|s| {
            let m = match &shared {
                Some((initial, transitions)) => model.subject_model_with_chain(initial.clone(), transitions.clone(), s),
                None => model.subject_model(cols, s),
            };
            forward_backward(&m)
        })
        .collect::<Result<_>>()?;
    // sequential sum in subject order: identical for any thread count
    let loglik = posts.iter().map(|p| p.loglik).sum();
    Ok((loglik, posts))
}

fn m_step(model: &LmModel, design: &Design, panel: &DataPanel, posts: &[Posteriors]) -> LmmParameters {
    let k = model.spec.states;
    let t_len = panel.occasions;
    let old = &model.params;

    let mut phi = old.phi.clone();
    for (j, &cats) in panel.categories.iter().enumerate() {
        let mut num = vec![vec![0.0; k]; cats];
        let mut den = vec![0.0; k];
        for (s, post) in panel.subjects.iter().zip(posts) {
            if let Some(ys) = &s.responses[j] {
                for (t, &y) in ys.iter().enumerate() {
                    for u in 0..k {
                        num[y as usize][u] += post.states[t][u];
                        den[u] += post.states[t][u];
                    }
                }
            }
        }
        for u in 0..k {
            if den[u] <= 0.0 {
                continue;
            }
            let mut col: Vec<f64> = (0..cats).map(|y| (num[y][u] / den[u]).max(PHI_FLOOR)).collect();
            let s: f64 = col.iter().sum();
            col.iter_mut().for_each(|v| *v /= s);
            for y in 0..cats {
                phi[j][y][u] = col[y];
            }
        }
    }

    let latent = match &old.latent {
        LatentParameters::Unrestricted { initial, transitions } => {
            let mut init = vec![0.0; k];
            for post in posts {
                for u in 0..k {
                    init[u] += post.states[0][u];
                }
            }
            let total: f64 = init.iter().sum();
            let initial = if total > 0.0 {
                init.iter().map(|v| v / total).collect()
            } else {
                initial.clone()
            };
            let transitions = (1..t_len)
                .map(|t| {
                    let mut acc = vec![0.0; k * k];
                    for post in posts {
                        for (a, v) in acc.iter_mut().zip(&post.pairwise[t - 1]) {
                            *a += v;
                        }
                    }
                    (0..k)
                        .map(|a| {
                            let row = &acc[a * k..(a + 1) * k];
                            let s: f64 = row.iter().sum();
                            if s > 0.0 {
                                row.iter().map(|v| v / s).collect()
                            } else {
                                transitions[t - 1][a].clone()
                            }
                        })
                        .collect()
                })
                .collect();
            LatentParameters::Unrestricted { initial, transitions }
        }
        LatentParameters::Logit { beta, gamma } => {
            let mut weights = vec![vec![0.0; k]; design.init_rows.len()];
            for (p, &r) in posts.iter().zip(&design.init_index) {
                weights[r].iter_mut().zip(&p.states[0]).for_each(|(w, v)| *w += v);
            }
            let mut beta = beta.clone();
            if k > 1 {
                LogitProblem {
                    xs: &design.init_rows,
                    weights: &weights,
                    categories: k,
                    reference: 0,
                }
                .maximise(&mut beta, NEWTON_STEPS);
            }
            let mut gamma = gamma.clone();
            if k > 1 && t_len > 1 {
                for (from, block) in gamma.iter_mut().enumerate() {
                    let mut weights = vec![vec![0.0; k]; design.trans_rows.len()];
                    let pairs = posts.iter().flat_map(|p| p.pairwise.iter());
                    for (xi, &r) in pairs.zip(&design.trans_index) {
                        weights[r]
                            .iter_mut()
                            .zip(&xi[from * k..(from + 1) * k])
                            .for_each(|(w, v)| *w += v);
                    }
                    LogitProblem {
                        xs: &design.trans_rows,
                        weights: &weights,
                        categories: k,
                        reference: from,
                    }
                    .maximise(block, NEWTON_STEPS);
                }
            }
            LatentParameters::Logit { beta, gamma }
        }
    };
    LmmParameters { phi, latent }
}

fn marginal_frequencies(panel: &DataPanel) -> Vec<Vec<f64>> {
    panel
        .categories
        .iter()
        .enumerate()
        .map(|(j, &cats)| {
            let mut counts = vec![0.0; cats];
            for s in &panel.subjects {
                if let Some(ys) = &s.responses[j] {
                    for &y in ys {
                        counts[y as usize] += 1.0;
                    }
                }
            }
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                counts.iter().map(|c| c / total).collect()
            } else {
                vec![1.0 / cats as f64; cats]
            }
        })
        .collect()
}

fn zero_latent(spec: &ModelSpec) -> LatentParameters {
    let k = spec.states;
    match spec.transition_form {
        TransitionForm::UnrestrictedTimeVarying => LatentParameters::Unrestricted {
            initial: vec![1.0 / k as f64; k],
            transitions: vec![vec![vec![1.0 / k as f64; k]; k]; spec.occasions - 1],
        },
        TransitionForm::LogitHomogeneous => LatentParameters::Logit {
            beta: vec![vec![0.0; 1 + spec.init_covariates.len()]; k - 1],
            gamma: vec![vec![vec![0.0; 1 + spec.trans_covariates.len()]; k - 1]; k],
        },
    }
}

/// Marginal frequencies tilted toward low categories in low states and high
/// categories in high states; zero logits.
fn deterministic_start(spec: &ModelSpec, panel: &DataPanel) -> LmmParameters {
    let k = spec.states;
    let marg = marginal_frequencies(panel);
    let phi = marg
        .iter()
        .map(|m| {
            let cats = m.len();
            let centre = (cats as f64 - 1.0) / 2.0;
            let cols: Vec<Vec<f64>> = (0..k)
                .map(|u| {
                    let tilt = if k == 1 {
                        0.0
                    } else {
                        3.0 * (u as f64 / (k - 1) as f64 - 0.5)
                    };
                    let mut col: Vec<f64> = (0..cats)
                        .map(|y| m[y].max(1e-3) * (tilt * (y as f64 - centre)).exp())
                        .collect();
                    let s: f64 = col.iter().sum();
                    col.iter_mut().for_each(|v| *v /= s);
                    col
                })
                .collect();
            (0..cats).map(|y| (0..k).map(|u| cols[u][y]).collect()).collect()
        })
        .collect();
    LmmParameters {
        phi,
        latent: zero_latent(spec),
    }
}

fn dirichlet_ones(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x: f64| (x / s).max(PHI_FLOOR)).collect()
}

fn softmax(etas: &[f64]) -> Vec<f64> {
    let m = etas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = etas.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Dirichlet(1) emission columns and N(0, 0.1) logits.
fn random_start(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> LmmParameters {
    let k = spec.states;
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let phi = spec
        .categories
        .iter()
        .map(|&cats| {
            let cols: Vec<Vec<f64>> = (0..k).map(|_| dirichlet_ones(rng, cats)).collect();
            (0..cats)
                .map(|y| (0..k).map(|u| cols[u][y] / cols[u].iter().sum::<f64>()).collect())
                .collect()
        })
        .collect();
    let latent = match spec.transition_form {
        TransitionForm::UnrestrictedTimeVarying => {
            let mut logits = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
            let initial = softmax(&logits(k));
            let transitions = (1..spec.occasions)
                .map(|_| {
                    (0..k)
                        .map(|from| {
                            let mut eta = logits(k);
                            eta[from] = 0.0;
                            softmax(&eta)
                        })
                        .collect()
                })
                .collect();
            LatentParameters::Unrestricted { initial, transitions }
        }
        TransitionForm::LogitHomogeneous => {
            let di = 1 + spec.init_covariates.len();
            let dt = 1 + spec.trans_covariates.len();
            LatentParameters::Logit {
                beta: (1..k).map(|_| (0..di).map(|_| normal.sample(rng)).collect()).collect(),
                gamma: (0..k)
                    .map(|_| (1..k).map(|_| (0..dt).map(|_| normal.sample(rng)).collect()).collect())
                    .collect(),
            }
        }
    };
    LmmParameters { phi, latent }
}

struct Run {
    params: LmmParameters,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn run_em(
    spec: &ModelSpec,
    start: LmmParameters,
    cols: &Columns,
    design: &Design,
    panel: &DataPanel,
    options: &EmOptions,
) -> Result<Run> {
    let mut model = LmModel {
        spec: spec.clone(),
        params: start,
    };
    let (mut prev, mut posts) = e_step(&model, cols, panel)?;
    let mut trace = vec![prev];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let next = m_step(&model, design, panel, &posts);
        let candidate = LmModel {
            spec: spec.clone(),
            params: next,
        };
        let (ll, new_posts) = e_step(&candidate, cols, panel)?;
        trace.push(ll);
        model = candidate;
        posts = new_posts;
        if (ll - prev).abs() <= options.tol * prev.abs() {
            converged = true;
            break;
        }
        prev = ll;
    }
    Ok(Run {
        params: model.params,
        trace,
        iterations,
        converged,
    })
}

/// Fits a model by EM from one deterministic and `n_random_starts` random
/// initialisations and returns the best run.
pub fn em_fit(spec: &ModelSpec, data: &DataPanel, options: &EmOptions) -> Result<FitResult> {
    spec.validate()?;
    if data.subjects.is_empty() {
        return Err(Error::EmptyData);
    }
    data.validate()?;
    data.check_against(spec)?;
    if options.max_iter == 0 || !(options.tol >= 0.0) {
        return Err(Error::Validation("EM needs max_iter >= 1 and tol >= 0".into()));
    }
    let cols = Columns::resolve(spec, data)?;
    let scaler = Standardizer::fit(&cols, data);
    let panel = scaler.apply(&cols, data);
    let design = Design::new(&cols, &panel);

    let mut best: Option<(usize, Run)> = None;
    let mut last_err = None;
    for start_id in 0..=options.n_random_starts {
        let start = if start_id == 0 {
            deterministic_start(spec, &panel)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(start_id as u64);
            random_start(spec, &mut rng)
        };
        match run_em(spec, start, &cols, &design, &panel, options) {
            Ok(run) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| run.trace.last().unwrap() > b.trace.last().unwrap());
                if better {
                    best = Some((start_id, run));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (start_id, run) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(Error::EmptyData)),
    };
    let raw = scaler.to_raw(&run.params);
    let model = LmModel {
        spec: spec.clone(),
        params: raw,
    }
    .canonical();
    let loglik = *run.trace.last().unwrap();
    let free_params = count_free_params(spec);
    let n = data.subjects.len();
    let (aic, bic) = information_criteria(loglik, free_params, n)?;
    Ok(FitResult {
        model,
        loglik,
        loglik_trace: run.trace,
        n_iterations: run.iterations,
        converged: run.converged,
        free_params,
        aic,
        bic,
        start_id,
        n_subjects: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::{simulate_responses, Subject};

    fn basic_panel(subjects: Vec<Subject>, t_len: usize) -> DataPanel {
        DataPanel {
            drugs: vec!["a".into(), "b".into()],
            categories: vec![3, 3],
            occasions: t_len,
            covariate_names: vec!["x".into()],
            subjects,
        }
    }

    fn simulated(n: usize, seed: u64) -> (LmModel, DataPanel) {
        let spec = ModelSpec::new(
            2,
            vec!["a".into(), "b".into()],
            vec![3, 3],
            6,
            TransitionForm::LogitHomogeneous,
        )
        .with_covariates(&["x".into()]);
        let truth = LmModel::new(
            spec,
            LmmParameters {
                phi: vec![
                    vec![vec![0.7, 0.1], vec![0.2, 0.2], vec![0.1, 0.7]],
                    vec![vec![0.6, 0.1], vec![0.3, 0.3], vec![0.1, 0.6]],
                ],
                latent: LatentParameters::Logit {
                    beta: vec![vec![0.2, 0.8]],
                    gamma: vec![vec![vec![-2.0, 0.7]], vec![vec![-2.5, -0.5]]],
                },
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = Columns {
            init: vec![0],
            trans: vec![0],
        };
        let subjects = (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let template = Subject {
                    id: i.to_string(),
                    responses: vec![Some(vec![]), if i % 4 == 0 { None } else { Some(vec![]) }],
                    baseline: vec![x + 50.0],
                    time_varying: (0..5).map(|t| vec![x + 50.0 + 0.1 * t as f64]).collect(),
                };
                simulate_responses(&truth, &cols, &template, &mut rng).1
            })
            .collect();
        (truth, basic_panel(subjects, 6))
    }

    #[test]
    fn single_state_fit_equals_frequencies() {
        let (_, panel) = simulated(200, 4);
        let spec = ModelSpec::new(
            1,
            panel.drugs.clone(),
            panel.categories.clone(),
            6,
            TransitionForm::UnrestrictedTimeVarying,
        );
        let fit = em_fit(
            &spec,
            &panel,
            &EmOptions {
                n_random_starts: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let marg = marginal_frequencies(&panel);
        let mut closed = 0.0;
        for j in 0..2 {
            for y in 0..3 {
                assert!((fit.model.params.phi[j][y][0] - marg[j][y]).abs() < 1e-9);
            }
            for s in &panel.subjects {
                if let Some(ys) = &s.responses[j] {
                    closed += ys.iter().map(|&y| marg[j][y as usize].ln()).sum::<f64>();
                }
            }
        }
        assert!((fit.loglik - closed).abs() < 1e-6 * closed.abs());
        assert!(fit.converged);
    }

    #[test]
    fn logit_fit_is_monotone_and_beats_truth_start() {
        let (truth, panel) = simulated(600, 9);
        let fit = em_fit(
            &truth.spec,
            &panel,
            &EmOptions {
                n_random_starts: 2,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fit.is_monotone(1e-8), "{:?}", fit.loglik_trace);
        let truth_ll = truth.loglik(&panel).unwrap();
        assert!(fit.loglik >= truth_ll - 1e-6);
        // log-likelihood of the reported raw-scale model matches the fit
        let again = fit.model.loglik(&panel).unwrap();
        assert!((again - fit.loglik).abs() < 1e-6, "{again} vs {}", fit.loglik);
        // covariate effect on the initial logit is recovered in sign
        if let LatentParameters::Logit { beta, .. } = &fit.model.params.latent {
            assert!(beta[0][1] > 0.0);
        }
    }

    #[test]
    fn empty_data_is_an_error() {
        let panel = basic_panel(vec![], 6);
        let spec = ModelSpec::new(
            2,
            panel.drugs.clone(),
            panel.categories.clone(),
            6,
            TransitionForm::LogitHomogeneous,
        );
        assert!(matches!(
            em_fit(&spec, &panel, &EmOptions::default()),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let (truth, panel) = simulated(100, 2);
        let fit = em_fit(
            &truth.spec,
            &panel,
            &EmOptions {
                max_iter: 2,
                n_random_starts: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.n_iterations, 2);
        assert_eq!(fit.loglik_trace.len(), 3);
    }

    #[test]
    fn thread_count_does_not_change_the_fit() {
        let (truth, panel) = simulated(300, 5);
        let opts = EmOptions {
            n_random_starts: 1,
            seed: 8,
            ..Default::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| em_fit(&truth.spec, &panel, &opts).unwrap());
        let b = four.install(|| em_fit(&truth.spec, &panel, &opts).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn unscaling_reproduces_linear_predictor() {
        let stats = vec![(50.0, 4.0), (2.0, 0.5)];
        let coef = vec![0.3, 1.2, -0.7];
        let raw = Standardizer::unscale(&coef, &stats);
        let x = [53.0, 1.4];
        let z = [(x[0] - 50.0) / 4.0, (x[1] - 2.0) / 0.5];
        let eta_std = coef[0] + coef[1] * z[0] + coef[2] * z[1];
        let eta_raw = raw[0] + raw[1] * x[0] + raw[2] * x[1];
        assert!((eta_std - eta_raw).abs() < 1e-12);
    }
}
