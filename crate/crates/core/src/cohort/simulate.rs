use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Drug, Gender, PatientRecord, PurchaseEvent};
use crate::adherence::{covered_days_band, AdherenceLevel};
use crate::lmm::{sample_categorical, sample_latent_path, Columns, LmModel};
use crate::pipeline::{covariate_names, subject_template};
use crate::{Error, Result, DAYS_PER_MONTH, MONTHS, PANEL_DAYS};

const STUDY_START: NaiveDate = match NaiveDate::from_ymd_opt(2015, 1, 1) {
    Some(d) => d,
    None => unreachable!(),
};
/// Index dates are spread uniformly over this many days after the study start.
const ENROLMENT_DAYS: u32 = 730;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateModel {
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: u32,
    pub age_max: u32,
    pub female_prob: f64,
    /// Mean of the Poisson comorbidity score in the first month.
    pub mcs_mean: f64,
    /// Monthly probability that the score goes up by one.
    pub mcs_increase_prob: f64,
    /// Probability of being a user of RAS, BB and MRA.
    pub user_prob: [f64; 3],
}

impl Default for CovariateModel {
    fn default() -> Self {
        CovariateModel {
            age_mean: 76.0,
            age_sd: 10.0,
            age_min: 18,
            age_max: 100,
            female_prob: 0.5,
            mcs_mean: 6.0,
            mcs_increase_prob: 0.05,
            user_prob: [0.8, 0.7, 0.45],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalModel {
    /// Yearly death hazard of a patient spending the whole year in a state
    /// with multiplier 1 and all covariates at zero.
    pub baseline_hazard: f64,
    /// One multiplier per latent state. The hazard is the baseline times the
    /// geometric mean of the multipliers along the true path.
    pub state_hazard_multipliers: Vec<f64>,
    #[serde(default)]
    pub age_log_hr: f64,
    #[serde(default)]
    pub gender_f_log_hr: f64,
    #[serde(default)]
    pub mcs_log_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensorModel {
    /// Administrative end of follow-up, in days after the first possible
    /// index date.
    pub horizon_days: u32,
}

impl Default for CensorModel {
    fn default() -> Self {
        CensorModel { horizon_days: 3300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCohortConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub model: LmModel,
    #[serde(default)]
    pub covariates: CovariateModel,
    pub survival: SurvivalModel,
    #[serde(default)]
    pub censoring: CensorModel,
}

impl SyntheticCohortConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SyntheticCohortConfig =
            toml::from_str(text).map_err(|e| Error::Validation(format!("simulator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Validation(m));
        if self.n_patients == 0 {
            return invalid("n_patients must be at least 1".into());
        }
        self.model
            .validate()
            .map_err(|e| Error::Validation(format!("true model: {e}")))?;
        let spec = &self.model.spec;
        let drugs: Vec<String> = Drug::ALL.iter().map(|d| d.as_str().to_string()).collect();
        if spec.drugs != drugs || spec.categories != [3, 3, 3] || spec.occasions != MONTHS {
            return invalid(format!(
                "true model must have channels {drugs:?} with 3 categories each and {MONTHS} occasions"
            ));
        }
        let names = covariate_names();
        if let Some(c) = spec
            .init_covariates
            .iter()
            .chain(&spec.trans_covariates)
            .find(|c| !names.contains(c))
        {
            return invalid(format!("unknown covariate `{c}` (available: {})", names.join(", ")));
        }
        let cov = &self.covariates;
        if !(cov.age_min >= 18 && cov.age_min <= cov.age_max) {
            return invalid("ages must satisfy 18 <= age_min <= age_max".into());
        }
        if !(cov.age_sd.is_finite() && cov.age_sd >= 0.0 && cov.age_mean.is_finite()) {
            return invalid("age distribution needs a finite mean and a non-negative sd".into());
        }
        let is_prob = |p: f64| (0.0..=1.0).contains(&p);
        if !is_prob(cov.female_prob) || !is_prob(cov.mcs_increase_prob) || !cov.user_prob.iter().all(|&p| is_prob(p)) {
            return invalid("covariate probabilities must lie in [0, 1]".into());
        }
        if !(cov.mcs_mean.is_finite() && cov.mcs_mean > 0.0) {
            return invalid("mcs_mean must be positive".into());
        }
        let surv = &self.survival;
        if !(surv.baseline_hazard.is_finite() && surv.baseline_hazard > 0.0) {
            return invalid("baseline_hazard must be positive".into());
        }
        if surv.state_hazard_multipliers.len() != spec.states {
            return invalid(format!(
                "{} hazard multipliers for {} latent states",
                surv.state_hazard_multipliers.len(),
                spec.states
            ));
        }
        if !surv.state_hazard_multipliers.iter().all(|m| m.is_finite() && *m > 0.0) {
            return invalid("hazard multipliers must be positive".into());
        }
        if ![surv.age_log_hr, surv.gender_f_log_hr, surv.mcs_log_hr]
            .iter()
            .all(|v| v.is_finite())
        {
            return invalid("covariate log hazard ratios must be finite".into());
        }
        if self.censoring.horizon_days < ENROLMENT_DAYS + PANEL_DAYS + 5 {
            return invalid(format!(
                "censoring horizon must be at least {} days",
                ENROLMENT_DAYS + PANEL_DAYS + 5
            ));
        }
        Ok(())
    }
}

/// Latent path and sampled adherence levels of one simulated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePath {
    pub patient_id: String,
    /// 0-based latent states, one per month.
    pub states: Vec<usize>,
    /// Per drug, the monthly levels, or `None` for a non-user.
    pub levels: Vec<Option<Vec<u8>>>,
    pub died_in_observation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCohort {
    pub patients: Vec<PatientRecord>,
    pub purchases: Vec<PurchaseEvent>,
    pub truth: Vec<TruePath>,
}

/// Samples a cohort: covariates, a latent path from the true model,
/// adherence levels from its emission probabilities and purchases that
/// reproduce those levels exactly, then a death time whose hazard depends
/// on the path.
///
/// Levels are cumulative, so some sequences cannot be produced by any
/// purchase history (a fully covered first month cannot be followed by a
/// low level in month two). At each month the emission distribution is
/// restricted to the levels still reachable and renormalised.
///
/// Patient `i` draws from its own ChaCha stream, so the result does not
/// depend on the thread count.
pub fn simulate_cohort(config: &SyntheticCohortConfig) -> Result<SimulatedCohort> {
    config.validate()?;
    let cols = Columns {
        init: resolve(&config.model.spec.init_covariates),
        trans: resolve(&config.model.spec.trans_covariates),
    };
    let per_patient: Vec<(PatientRecord, Vec<PurchaseEvent>, TruePath)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(config, &cols, i))
        .collect();
    let mut out = SimulatedCohort {
        patients: Vec::with_capacity(per_patient.len()),
        purchases: Vec::new(),
        truth: Vec::with_capacity(per_patient.len()),
    };
    for (p, e, t) in per_patient {
        out.patients.push(p);
        out.purchases.extend(e);
        out.truth.push(t);
    }
    Ok(out)
}

fn resolve(names: &[String]) -> Vec<usize> {
    let all = covariate_names();
    names.iter().map(|n| all.iter().position(|a| a == n).unwrap()).collect()
}

fn simulate_patient(
    config: &SyntheticCohortConfig,
    cols: &Columns,
    i: usize,
) -> (PatientRecord, Vec<PurchaseEvent>, TruePath) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64);
    let cov = &config.covariates;
    let patient_id = format!("P{:06}", i + 1);

    let offset = rng.random_range(0..=ENROLMENT_DAYS);
    let index_date = STUDY_START + Days::new(offset.into());
    let age_draw = Normal::new(cov.age_mean, cov.age_sd).unwrap().sample(&mut rng);
    let age = (age_draw.round().max(0.0) as u32).clamp(cov.age_min, cov.age_max);
    let gender = if rng.random::<f64>() < cov.female_prob {
        Gender::F
    } else {
        Gender::M
    };
    let mut mcs = [0u32; MONTHS];
    mcs[0] = Poisson::new(cov.mcs_mean).unwrap().sample(&mut rng) as u32;
    for t in 1..MONTHS {
        mcs[t] = mcs[t - 1] + u32::from(rng.random::<f64>() < cov.mcs_increase_prob);
    }
    let users: Vec<bool> = cov.user_prob.iter().map(|&p| rng.random::<f64>() < p).collect();

    let mut patient = PatientRecord {
        patient_id: patient_id.clone(),
        index_date,
        age,
        gender,
        mcs,
        followup_days: 0,
        event: false,
    };
    let template = subject_template(&patient, &users);
    let (initial, transitions) = config.model.latent_chain(cols, &template);
    let states = sample_latent_path(&initial, &transitions, &mut rng);

    let mut purchases = Vec::new();
    let mut levels = Vec::with_capacity(Drug::ALL.len());
    for (j, drug) in Drug::ALL.into_iter().enumerate() {
        if !users[j] {
            levels.push(None);
            continue;
        }
        let phi = &config.model.params.phi[j];
        let mut covered = 0u32;
        let mut seq = Vec::with_capacity(MONTHS);
        for (t0, &u) in states.iter().enumerate() {
            let t = t0 + 1;
            let reachable = covered..=covered + DAYS_PER_MONTH;
            let bands = AdherenceLevel::ALL.map(|l| {
                let b = covered_days_band(l, t);
                (*b.start()).max(*reachable.start())..=(*b.end()).min(*reachable.end())
            });
            let probs: Vec<f64> = (0..3)
                .map(|y| if bands[y].is_empty() { 0.0 } else { phi[y][u] })
                .collect();
            let y = if probs.iter().sum::<f64>() > 0.0 {
                sample_categorical(&probs, &mut rng)
            } else {
                // every reachable level has zero emission mass: take the first reachable one
                bands.iter().position(|b| !b.is_empty()).unwrap()
            };
            let next = rng.random_range(bands[y].clone());
            if next > covered {
                purchases.push(PurchaseEvent {
                    patient_id: patient_id.clone(),
                    drug,
                    dispense_day: DAYS_PER_MONTH * t0 as u32,
                    coverage_days: next - covered,
                });
            }
            covered = next;
            seq.push(y as u8);
        }
        if covered == 0 {
            // users without coverage in the panel still bought once in the first year
            purchases.push(PurchaseEvent {
                patient_id: patient_id.clone(),
                drug,
                dispense_day: rng.random_range(PANEL_DAYS..crate::USER_WINDOW_DAYS),
                coverage_days: DAYS_PER_MONTH,
            });
        }
        levels.push(Some(seq));
    }

    let surv = &config.survival;
    let log_mult: f64 = states
        .iter()
        .map(|&u| surv.state_hazard_multipliers[u].ln())
        .sum::<f64>()
        / MONTHS as f64;
    let hazard = surv.baseline_hazard
        * (log_mult
            + surv.age_log_hr * f64::from(age)
            + surv.gender_f_log_hr * gender.indicator()
            + surv.mcs_log_hr * f64::from(mcs[MONTHS - 1]))
        .exp();
    let e: f64 = Exp1.sample(&mut rng);
    let death_day = (e / hazard * DAYS_PER_YEAR).ceil().min(u32::MAX as f64) as u32;
    let censor_day = config.censoring.horizon_days - offset;
    patient.event = death_day <= censor_day;
    patient.followup_days = death_day.min(censor_day);

    let truth = TruePath {
        patient_id,
        states,
        levels,
        died_in_observation: patient.died_in_observation(),
    };
    (patient, purchases, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adherence::build_panel;
    use crate::cohort::Cohort;
    use crate::lmm::{LatentParameters, LmmParameters, ModelSpec, TransitionForm};

    fn drugs() -> Vec<String> {
        Drug::ALL.iter().map(|d| d.as_str().to_string()).collect()
    }

    fn config(k: usize, stay: f64, n: usize) -> SyntheticCohortConfig {
        let spec = ModelSpec::new(k, drugs(), vec![3; 3], MONTHS, TransitionForm::UnrestrictedTimeVarying);
        // state u favours level round(2u / (k - 1))
        let peak = |u: usize| if k == 1 { 1 } else { (2 * u + (k - 1) / 2) / (k - 1) };
        let phi = vec![
            (0..3)
                .map(|y| (0..k).map(|u| if y == peak(u) { 0.7 } else { 0.15 }).collect())
                .collect();
            3
        ];
        let tm: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| {
                        if k == 1 {
                            1.0
                        } else if a == b {
                            stay
                        } else {
                            (1.0 - stay) / (k - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let model = LmModel::new(
            spec,
            LmmParameters {
                phi,
                latent: LatentParameters::Unrestricted {
                    initial: vec![1.0 / k as f64; k],
                    transitions: vec![tm; MONTHS - 1],
                },
            },
        )
        .unwrap();
        SyntheticCohortConfig {
            n_patients: n,
            seed: 7,
            model,
            covariates: CovariateModel::default(),
            survival: SurvivalModel {
                baseline_hazard: 0.2,
                state_hazard_multipliers: (0..k).map(|u| 2.0 / (1.0 + u as f64)).collect(),
                age_log_hr: 0.0,
                gender_f_log_hr: 0.0,
                mcs_log_hr: 0.0,
            },
            censoring: CensorModel::default(),
        }
    }

    #[test]
    fn single_state_paths_are_constant() {
        let sim = simulate_cohort(&config(1, 1.0, 200)).unwrap();
        assert!(sim.truth.iter().all(|t| t.states.iter().all(|&s| s == 0)));
    }

    #[test]
    fn same_seed_same_cohort() {
        let cfg = config(3, 0.9, 300);
        let a = simulate_cohort(&cfg).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_cohort(&cfg).unwrap());
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 8;
        assert_ne!(a, simulate_cohort(&other).unwrap());
    }

    #[test]
    fn sticky_chain_gives_mostly_constant_paths() {
        let sim = simulate_cohort(&config(4, 0.999, 2000)).unwrap();
        let constant = sim
            .truth
            .iter()
            .filter(|t| t.states.iter().all(|&s| s == t.states[0]))
            .count();
        assert!(constant as f64 >= 0.95 * 2000.0, "{constant}");
    }

    #[test]
    fn purchases_reproduce_sampled_levels() {
        let sim = simulate_cohort(&config(4, 0.8, 1000)).unwrap();
        let cohort = Cohort {
            patients: sim.patients.clone(),
            purchases: sim.purchases.clone(),
        };
        let by_patient = cohort.purchases_by_patient();
        for (p, truth) in sim.patients.iter().zip(&sim.truth) {
            let events = by_patient.get(p.patient_id.as_str()).cloned().unwrap_or_default();
            let panel = build_panel(p, &events).unwrap();
            for (ch, expected) in panel.channels.iter().zip(&truth.levels) {
                let got = ch
                    .levels
                    .as_ref()
                    .map(|l| l.iter().map(|v| v.code()).collect::<Vec<_>>());
                assert_eq!(&got, expected, "patient {}", p.patient_id);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = config(2, 0.9, 10);
        cfg.n_patients = 0;
        assert!(matches!(simulate_cohort(&cfg), Err(Error::Validation(_))));
        let mut cfg = config(2, 0.9, 10);
        cfg.survival.state_hazard_multipliers = vec![1.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = config(2, 0.9, 10);
        cfg.survival.state_hazard_multipliers = vec![1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hazard_follows_latent_state() {
        let sim = simulate_cohort(&config(2, 0.999, 4000)).unwrap();
        let rate = |state: usize| {
            let group: Vec<_> = sim
                .patients
                .iter()
                .zip(&sim.truth)
                .filter(|(_, t)| t.states.iter().all(|&s| s == state))
                .map(|(p, _)| p)
                .collect();
            let deaths = group.iter().filter(|p| p.event).count() as f64;
            let years: f64 = group.iter().map(|p| p.followup_days as f64 / DAYS_PER_YEAR).sum();
            deaths / years
        };
        // multipliers 2 and 1 on a baseline of 0.2 per year
        assert!((rate(0) - 0.4).abs() < 0.04, "{}", rate(0));
        assert!((rate(1) - 0.2).abs() < 0.03, "{}", rate(1));
    }

    #[test]
    fn toml_config_round_trip() {
        let cfg = config(2, 0.9, 10);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SyntheticCohortConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(SyntheticCohortConfig::from_toml_str("n_patients = 3").is_err());
    }
}
