//! Glue between the stages: adherence panels to model data, decoded paths
//! to profiles, and patient outcomes to survival samples.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adherence::{build_panel, AdherencePanel};
use crate::cohort::{Cohort, Drug, PatientRecord};
use crate::decoding::{
    classify_profile, local_decode, viterbi_decode, DecodeMode, LatentPath, ProfileCount, ProfileLabel,
};
use crate::error::ensure;
use crate::lmm::{forward_backward, Columns, DataPanel, LmModel, Subject};
use crate::survival::SurvivalSample;
use crate::{Error, Result, MONTHS, USER_WINDOW_DAYS};

/// Covariates available to the latent model, in panel column order.
pub fn covariate_names() -> Vec<String> {
    ["age", "gender_F", "mcs"].map(String::from).to_vec()
}

/// Adherence levels per channel.
pub const LEVELS: usize = 3;

fn covariate_row(patient: &PatientRecord, month: usize) -> Vec<f64> {
    vec![
        f64::from(patient.age),
        patient.gender.indicator(),
        f64::from(patient.mcs[month]),
    ]
}

/// A model subject with covariates filled in and all-zero responses on the
/// channels marked as used. The initial probabilities see the first month's
/// comorbidity score; the move into month `t` sees month `t`'s.
pub fn subject_template(patient: &PatientRecord, users: &[bool]) -> Subject {
    Subject {
        id: patient.patient_id.clone(),
        responses: users.iter().map(|&u| u.then(|| vec![0; MONTHS])).collect(),
        baseline: covariate_row(patient, 0),
        time_varying: (1..MONTHS).map(|t| covariate_row(patient, t)).collect(),
    }
}

pub fn subject_from_panel(patient: &PatientRecord, panel: &AdherencePanel) -> Subject {
    let users: Vec<bool> = panel.channels.iter().map(|c| c.user).collect();
    let mut s = subject_template(patient, &users);
    for (slot, ch) in s.responses.iter_mut().zip(&panel.channels) {
        *slot = ch.levels.as_ref().map(|l| l.iter().map(|v| v.code()).collect());
    }
    s
}

/// Adherence panels of every patient, in patient order.
pub fn build_adherence(cohort: &Cohort) -> Result<Vec<AdherencePanel>> {
    let by_patient = cohort.purchases_by_patient();
    cohort
        .patients
        .par_iter()
        .map(|p| {
            let events = by_patient.get(p.patient_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            build_panel(p, events)
        })
        .collect()
}

/// Model data for patients using at least one drug; patients with no
/// purchase in the first year carry no adherence information and are left
/// out.
pub fn build_data_panel(patients: &[PatientRecord], panels: &[AdherencePanel]) -> Result<DataPanel> {
    ensure!(
        patients.len() == panels.len(),
        "one adherence panel per patient is required"
    );
    let subjects = patients
        .iter()
        .zip(panels)
        .filter(|(_, a)| a.channels.iter().any(|c| c.user))
        .map(|(p, a)| {
            ensure!(
                p.patient_id == a.patient_id,
                "panel of `{}` paired with patient `{}`",
                a.patient_id,
                p.patient_id
            );
            Ok(subject_from_panel(p, a))
        })
        .collect::<Result<Vec<_>>>()?;
    if subjects.is_empty() {
        return Err(Error::EmptyData);
    }
    let panel = DataPanel {
        drugs: Drug::ALL.iter().map(|d| d.as_str().to_string()).collect(),
        categories: vec![LEVELS; Drug::ALL.len()],
        occasions: MONTHS,
        covariate_names: covariate_names(),
        subjects,
    };
    panel.validate()?;
    Ok(panel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSubject {
    pub patient_id: String,
    pub path: LatentPath,
    /// Largest posterior state probability at each month.
    pub posterior_max: Vec<f64>,
    pub label: ProfileLabel,
}

/// Decodes every subject and classifies the paths. States are numbered in
/// the model's own order, so pass a canonically ordered model.
pub fn decode_cohort(model: &LmModel, data: &DataPanel, mode: DecodeMode) -> Result<Vec<DecodedSubject>> {
    data.check_against(&model.spec)?;
    if model.spec.states > 4 {
        return Err(Error::Validation(format!(
            "profiles are defined for at most 4 latent states, the model has {}",
            model.spec.states
        )));
    }
    let cols = Columns::resolve(&model.spec, data)?;
    data.subjects
        .par_iter()
        .map(|s| {
            let m = model.subject_model(&cols, s);
            let post = forward_backward(&m)?;
            let path = match mode {
                DecodeMode::Local => local_decode(&post.states),
                DecodeMode::Global => viterbi_decode(&m)?.0,
            };
            let label = classify_profile(&path)?;
            Ok(DecodedSubject {
                patient_id: s.id.clone(),
                posterior_max: post
                    .states
                    .iter()
                    .map(|r| r.iter().copied().fold(0.0, f64::max))
                    .collect(),
                path,
                label,
            })
        })
        .collect()
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// `patient_id,t,state,posterior_max`, one row per month.
pub fn write_decoded_paths(path: &Path, decoded: &[DecodedSubject]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "patient_id,t,state,posterior_max").map_err(io)?;
    for d in decoded {
        for (t, (s, p)) in d.path.states.iter().zip(&d.posterior_max).enumerate() {
            writeln!(w, "{},{},{},{}", d.patient_id, t + 1, s, p).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_profiles(path: &Path, decoded: &[DecodedSubject]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "patient_id,profile_label").map_err(io)?;
    for d in decoded {
        writeln!(w, "{},{}", d.patient_id, d.label).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_profiles(path: &Path) -> Result<Vec<(String, ProfileLabel)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["patient_id", "profile_label"] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "expected header `patient_id,profile_label`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line,
            column: "patient_id".into(),
            message: e.to_string(),
        })?;
        let label = row[1].parse::<ProfileLabel>().map_err(|message| Error::Parse {
            file: path.to_path_buf(),
            line,
            column: "profile_label".into(),
            message,
        })?;
        out.push((row[0].to_string(), label));
    }
    Ok(out)
}

/// `profile,description,count,retained`.
pub fn write_profile_table(path: &Path, table: &[ProfileCount]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "profile,description,count,retained").map_err(io)?;
    for row in table {
        writeln!(
            w,
            "{},{},{},{}",
            row.label,
            row.label.description(),
            row.count,
            row.retained as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Where the survival clock starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOrigin {
    /// End of the one-year observation period.
    #[default]
    Landmark,
    /// Index hospitalisation.
    Index,
}

const DAYS_PER_YEAR: f64 = 365.25;

/// Survival samples of profiled patients, times in years. Patients whose
/// follow-up ends at or before the time origin are dropped. The
/// comorbidity covariate is the last observed month's score.
pub fn survival_samples(
    patients: &[PatientRecord],
    profiles: &[(String, ProfileLabel)],
    origin: TimeOrigin,
) -> Result<Vec<SurvivalSample>> {
    let by_id: HashMap<&str, &PatientRecord> = patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let start = match origin {
        TimeOrigin::Landmark => USER_WINDOW_DAYS,
        TimeOrigin::Index => 0,
    };
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for (id, label) in profiles {
        let Some(p) = by_id.get(id.as_str()) else {
            missing.push(id.clone());
            continue;
        };
        if p.followup_days <= start {
            continue;
        }
        out.push(SurvivalSample {
            patient_id: id.clone(),
            time: f64::from(p.followup_days - start) / DAYS_PER_YEAR,
            event: p.event,
            group: *label,
            age: f64::from(p.age),
            gender_f: p.gender.indicator(),
            mcs: f64::from(p.mcs[MONTHS - 1]),
        });
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Validation(format!(
            "profiles reference unknown patients: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Gender, PurchaseEvent};
    use chrono::NaiveDate;

    fn patient(id: &str, followup_days: u32, event: bool) -> PatientRecord {
        let mut mcs = [2; MONTHS];
        mcs[MONTHS - 1] = 5;
        PatientRecord {
            patient_id: id.into(),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            age: 70,
            gender: Gender::F,
            mcs,
            followup_days,
            event,
        }
    }

    #[test]
    fn subject_covariates_follow_months() {
        let mut p = patient("a", 900, false);
        p.mcs = std::array::from_fn(|i| i as u32);
        let s = subject_template(&p, &[true, false, true]);
        assert_eq!(s.baseline, vec![70.0, 1.0, 0.0]);
        assert_eq!(s.time_varying.len(), MONTHS - 1);
        assert_eq!(s.time_varying[0], vec![70.0, 1.0, 1.0]);
        assert_eq!(s.time_varying[10], vec![70.0, 1.0, 11.0]);
        assert!(s.responses[1].is_none());
    }

    #[test]
    fn non_users_are_left_out_of_the_model_data() {
        let cohort = Cohort {
            patients: vec![patient("a", 900, false), patient("b", 900, false)],
            purchases: vec![PurchaseEvent {
                patient_id: "a".into(),
                drug: Drug::Bb,
                dispense_day: 0,
                coverage_days: 90,
            }],
        };
        let panels = build_adherence(&cohort).unwrap();
        let data = build_data_panel(&cohort.patients, &panels).unwrap();
        assert_eq!(data.subjects.len(), 1);
        let s = &data.subjects[0];
        assert!(s.responses[0].is_none() && s.responses[2].is_none());
        assert_eq!(s.responses[1].as_ref().unwrap()[..4], [2, 2, 2, 1]);
    }

    #[test]
    fn landmark_times() {
        let patients = vec![
            patient("a", 365 + 730, true),
            patient("b", 365, false),
            patient("c", 100, false),
        ];
        let profiles: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|id| (id.to_string(), ProfileLabel::A))
            .collect();
        let s = survival_samples(&patients, &profiles, TimeOrigin::Landmark).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].time - 730.0 / 365.25).abs() < 1e-12);
        assert_eq!(s[0].mcs, 5.0);
        let s = survival_samples(&patients, &profiles, TimeOrigin::Index).unwrap();
        assert_eq!(s.len(), 3);
        let bad = vec![("zz".to_string(), ProfileLabel::B)];
        assert!(survival_samples(&patients, &bad, TimeOrigin::Index).is_err());
    }

    #[test]
    fn profiles_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let decoded = vec![DecodedSubject {
            patient_id: "a".into(),
            path: LatentPath {
                states: vec![4; MONTHS],
            },
            posterior_max: vec![1.0; MONTHS],
            label: ProfileLabel::D,
        }];
        let f = dir.path().join("profiles.csv");
        write_profiles(&f, &decoded).unwrap();
        assert_eq!(read_profiles(&f).unwrap(), vec![("a".to_string(), ProfileLabel::D)]);
        std::fs::write(&f, "patient_id,profile_label\na,Q\n").unwrap();
        let err = read_profiles(&f).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
