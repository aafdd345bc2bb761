//! Cohort data model, file ingestion and synthetic cohort generation.

mod io;
mod simulate;

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::{Error, MONTHS, USER_WINDOW_DAYS};

pub use io::{load_cohort, read_patients, read_purchases, write_patients, write_purchases, write_truth};
pub use simulate::{
    simulate_cohort, CensorModel, CovariateModel, SimulatedCohort, SurvivalModel, SyntheticCohortConfig, TruePath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Drug {
    #[serde(rename = "RAS")]
    Ras,
    #[serde(rename = "BB")]
    Bb,
    #[serde(rename = "MRA")]
    Mra,
}

impl Drug {
    pub const ALL: [Drug; 3] = [Drug::Ras, Drug::Bb, Drug::Mra];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Drug::Ras => "RAS",
            Drug::Bb => "BB",
            Drug::Mra => "MRA",
        }
    }
}

impl fmt::Display for Drug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Drug {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RAS" => Ok(Drug::Ras),
            "BB" => Ok(Drug::Bb),
            "MRA" => Ok(Drug::Mra),
            other => Err(format!("unknown drug class `{other}` (expected RAS, BB or MRA)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    /// Design-matrix encoding: F = 1, M = 0.
    pub fn indicator(self) -> f64 {
        match self {
            Gender::M => 0.0,
            Gender::F => 1.0,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "M" => Ok(Gender::M),
            "F" => Ok(Gender::F),
            other => Err(format!("unknown gender `{other}` (expected M or F)")),
        }
    }
}

/// One patient of the incident heart-failure cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Discharge date of the first heart-failure hospitalisation.
    pub index_date: NaiveDate,
    pub age: u32,
    pub gender: Gender,
    /// Multisource comorbidity score for each observation month.
    pub mcs: [u32; MONTHS],
    /// Days from the index date to death or censoring.
    pub followup_days: u32,
    /// `true` when death was observed.
    pub event: bool,
}

impl PatientRecord {
    /// Death observed inside the first-year observation window.
    pub fn died_in_observation(&self) -> bool {
        self.event && self.followup_days < USER_WINDOW_DAYS
    }
}

/// One dispensing of a drug class. `coverage_days` is already adjusted for
/// the defined daily dose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseEvent {
    pub patient_id: String,
    pub drug: Drug,
    pub dispense_day: u32,
    pub coverage_days: u32,
}

/// Patients plus their purchases, linked by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub purchases: Vec<PurchaseEvent>,
}

/// Counts of patients removed by [`Cohort::filter_for_analysis`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterSummary {
    pub kept: usize,
    pub died_in_observation: usize,
    pub censored_without_purchase: usize,
}

impl Cohort {
    /// Purchases indexed by patient id, in file order.
    pub fn purchases_by_patient(&self) -> std::collections::HashMap<&str, Vec<&PurchaseEvent>> {
        let mut map: std::collections::HashMap<&str, Vec<&PurchaseEvent>> = std::collections::HashMap::new();
        for p in &self.purchases {
            map.entry(p.patient_id.as_str()).or_default().push(p);
        }
        map
    }

    /// Applies the analysis-cohort exclusions: deaths inside the
    /// observation year, and censoring inside the observation year with no
    /// purchase at all. Purchases of dropped patients are dropped too.
    pub fn filter_for_analysis(&self) -> (Cohort, FilterSummary) {
        let with_purchase: std::collections::HashSet<&str> =
            self.purchases.iter().map(|p| p.patient_id.as_str()).collect();
        let mut summary = FilterSummary::default();
        let mut keep = std::collections::HashSet::new();
        let mut patients = Vec::new();
        for p in &self.patients {
            if p.died_in_observation() {
                summary.died_in_observation += 1;
            } else if p.followup_days < USER_WINDOW_DAYS && !with_purchase.contains(p.patient_id.as_str()) {
                summary.censored_without_purchase += 1;
            } else {
                keep.insert(p.patient_id.as_str());
                patients.push(p.clone());
            }
        }
        summary.kept = patients.len();
        let purchases = self
            .purchases
            .iter()
            .filter(|e| keep.contains(e.patient_id.as_str()))
            .cloned()
            .collect();
        (Cohort { patients, purchases }, summary)
    }
}

pub(crate) fn validate_patient(p: &PatientRecord) -> Result<(), Error> {
    if p.age < 18 {
        return Err(Error::Contract(format!(
            "patient `{}`: age {} is below 18",
            p.patient_id, p.age
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patient(id: &str, followup: u32, event: bool) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            age: 70,
            gender: Gender::F,
            mcs: [0; MONTHS],
            followup_days: followup,
            event,
        }
    }

    #[test]
    fn filter_drops_early_deaths_and_silent_censoring() {
        let cohort = Cohort {
            patients: vec![
                patient("a", 2000, false),
                patient("b", 100, true),
                patient("c", 200, false),
                patient("d", 200, false),
            ],
            purchases: vec![
                PurchaseEvent {
                    patient_id: "b".into(),
                    drug: Drug::Ras,
                    dispense_day: 0,
                    coverage_days: 30,
                },
                PurchaseEvent {
                    patient_id: "d".into(),
                    drug: Drug::Bb,
                    dispense_day: 5,
                    coverage_days: 30,
                },
            ],
        };
        let (kept, summary) = cohort.filter_for_analysis();
        let ids: Vec<_> = kept.patients.iter().map(|p| p.patient_id.as_str()).collect();
        assert_eq!(ids, ["a", "d"]);
        assert_eq!(summary.died_in_observation, 1);
        assert_eq!(summary.censored_without_purchase, 1);
        assert_eq!(kept.purchases.len(), 1);
    }

    #[test]
    fn gender_encoding() {
        assert_eq!(Gender::F.indicator(), 1.0);
        assert_eq!(Gender::M.indicator(), 0.0);
    }
}
