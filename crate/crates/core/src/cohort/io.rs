use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::Path;

use chrono::NaiveDate;

use super::{validate_patient, Cohort, Drug, Gender, PatientRecord, PurchaseEvent, TruePath};
use crate::{Error, Result, MONTHS};

const PATIENT_COLUMNS: [&str; 6] = ["patient_id", "index_date", "age", "gender", "followup_days", "event"];
const PURCHASE_COLUMNS: [&str; 4] = ["patient_id", "drug", "dispense_day", "coverage_days"];

struct Table<'a> {
    path: &'a Path,
    index: Vec<(String, usize)>,
}

impl<'a> Table<'a> {
    fn new(path: &'a Path, headers: &csv::StringRecord, required: &[String]) -> Result<Self> {
        let mut index = Vec::with_capacity(required.len());
        for name in required {
            let pos = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse {
                    file: path.to_path_buf(),
                    line: 1,
                    column: name.clone(),
                    message: "missing column in header".into(),
                })?;
            index.push((name.clone(), pos));
        }
        Ok(Table { path, index })
    }

    fn field<'r>(&self, record: &'r csv::StringRecord, col: usize) -> Result<&'r str> {
        let (name, pos) = &self.index[col];
        record.get(*pos).map(str::trim).ok_or_else(|| Error::Parse {
            file: self.path.to_path_buf(),
            line: line_of(record),
            column: name.clone(),
            message: "missing field".into(),
        })
    }

    fn parse<T>(&self, record: &csv::StringRecord, col: usize) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.field(record, col)?;
        raw.parse::<T>()
            .map_err(|e| self.error(record, col, format!("cannot parse `{raw}`: {e}")))
    }

    fn error(&self, record: &csv::StringRecord, col: usize, message: String) -> Error {
        Error::Parse {
            file: self.path.to_path_buf(),
            line: line_of(record),
            column: self.index[col].0.clone(),
            message,
        }
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        file: path.to_path_buf(),
        line,
        column: String::new(),
        message: err.to_string(),
    }
}

pub fn read_patients(path: &Path) -> Result<Vec<PatientRecord>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut names: Vec<String> = PATIENT_COLUMNS.iter().map(|s| s.to_string()).collect();
    names.extend((1..=MONTHS).map(|m| format!("mcs_{m}")));
    let table = Table::new(path, &headers, &names)?;

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let patient_id = table.field(&rec, 0)?.to_string();
        if patient_id.is_empty() {
            return Err(table.error(&rec, 0, "empty patient id".into()));
        }
        if !seen.insert(patient_id.clone()) {
            return Err(table.error(&rec, 0, format!("duplicate patient id `{patient_id}`")));
        }
        let date_raw = table.field(&rec, 1)?;
        let index_date = NaiveDate::parse_from_str(date_raw, "%Y-%m-%d")
            .map_err(|e| table.error(&rec, 1, format!("cannot parse `{date_raw}` as ISO-8601 date: {e}")))?;
        let age: u32 = table.parse(&rec, 2)?;
        if age < 18 {
            return Err(table.error(&rec, 2, format!("age {age} is below 18")));
        }
        let gender: Gender = table.parse(&rec, 3)?;
        let followup_days: u32 = table.parse(&rec, 4)?;
        let event = match table.field(&rec, 5)? {
            "0" => false,
            "1" => true,
            other => return Err(table.error(&rec, 5, format!("expected 0 or 1, found `{other}`"))),
        };
        let mut mcs = [0u32; MONTHS];
        for (m, slot) in mcs.iter_mut().enumerate() {
            *slot = table.parse(&rec, PATIENT_COLUMNS.len() + m)?;
        }
        let record = PatientRecord {
            patient_id,
            index_date,
            age,
            gender,
            mcs,
            followup_days,
            event,
        };
        validate_patient(&record)?;
        out.push(record);
    }
    Ok(out)
}

/// Reads purchases, deduplicating on `(patient_id, drug, dispense_day)` and
/// keeping the largest coverage. Output is sorted by that key.
pub fn read_purchases(path: &Path) -> Result<Vec<PurchaseEvent>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<String> = PURCHASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let table = Table::new(path, &headers, &names)?;

    let mut dedup: BTreeMap<(String, Drug, u32), u32> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let patient_id = table.field(&rec, 0)?.to_string();
        if patient_id.is_empty() {
            return Err(table.error(&rec, 0, "empty patient id".into()));
        }
        let drug: Drug = table.parse(&rec, 1)?;
        let dispense_day: u32 = table.parse(&rec, 2)?;
        let coverage_days: u32 = table.parse(&rec, 3)?;
        if coverage_days == 0 {
            return Err(table.error(&rec, 3, "coverage_days must be at least 1".into()));
        }
        let slot = dedup.entry((patient_id, drug, dispense_day)).or_insert(0);
        *slot = (*slot).max(coverage_days);
    }
    Ok(dedup
        .into_iter()
        .map(|((patient_id, drug, dispense_day), coverage_days)| PurchaseEvent {
            patient_id,
            drug,
            dispense_day,
            coverage_days,
        })
        .collect())
}

/// Loads a patients file and a purchases file and checks that every
/// purchase links to a known patient.
pub fn load_cohort(patients_file: &Path, purchases_file: &Path) -> Result<Cohort> {
    let patients = read_patients(patients_file)?;
    let purchases = read_purchases(purchases_file)?;
    let known: HashSet<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();
    let orphans: std::collections::BTreeSet<&str> = purchases
        .iter()
        .map(|p| p.patient_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::OrphanPurchases(orphans.into_iter().map(String::from).collect()));
    }
    Ok(Cohort { patients, purchases })
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_patients(path: &Path, patients: &[PatientRecord]) -> Result<()> {
    let mut w = create(path)?;
    let mut header: Vec<String> = PATIENT_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=MONTHS).map(|m| format!("mcs_{m}")));
    w.write_record(&header).map_err(write_err(path))?;
    for p in patients {
        let mut row = vec![
            p.patient_id.clone(),
            p.index_date.format("%Y-%m-%d").to_string(),
            p.age.to_string(),
            p.gender.to_string(),
            p.followup_days.to_string(),
            (p.event as u8).to_string(),
        ];
        row.extend(p.mcs.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_purchases(path: &Path, purchases: &[PurchaseEvent]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(PURCHASE_COLUMNS).map_err(write_err(path))?;
    for p in purchases {
        w.write_record([
            p.patient_id.as_str(),
            p.drug.as_str(),
            &p.dispense_day.to_string(),
            &p.coverage_days.to_string(),
        ])
        .map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ground-truth latent paths and sampled adherence levels of a simulation.
pub fn write_truth(path: &Path, truth: &[TruePath]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record([
        "patient_id",
        "month",
        "state",
        "level_RAS",
        "level_BB",
        "level_MRA",
        "died_in_observation",
    ])
    .map_err(write_err(path))?;
    for tp in truth {
        for (t, state) in tp.states.iter().enumerate() {
            let mut row = vec![tp.patient_id.clone(), (t + 1).to_string(), (state + 1).to_string()];
            for ch in &tp.levels {
                row.push(ch.as_ref().map(|l| l[t].to_string()).unwrap_or_default());
            }
            row.push((tp.died_in_observation as u8).to_string());
            w.write_record(&row).map_err(write_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    const PATIENTS: &str = "patient_id,index_date,age,gender,followup_days,event,mcs_1,mcs_2,mcs_3,mcs_4,mcs_5,mcs_6,mcs_7,mcs_8,mcs_9,mcs_10,mcs_11,mcs_12
p1,2015-03-01,72,F,1500,1,2,2,2,2,2,3,3,3,3,3,3,3
p2,2016-07-15,65,M,2400,0,0,0,0,0,0,0,0,0,0,0,0,0
";

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_valid_pair_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let pat = write(dir.path(), "patients.csv", PATIENTS);
        let pur = write(
            dir.path(),
            "purchases.csv",
            "patient_id,drug,dispense_day,coverage_days\np1,RAS,10,28\np1,RAS,10,30\np2,BB,0,60\np1,MRA,40,30\n",
        );
        let cohort = load_cohort(&pat, &pur).unwrap();
        assert_eq!(cohort.patients.len(), 2);
        assert_eq!(cohort.patients[0].gender, Gender::F);
        assert_eq!(cohort.patients[0].mcs[11], 3);
        assert!(cohort.patients[0].event);
        assert_eq!(cohort.purchases.len(), 3);
        let ras: Vec<_> = cohort.purchases.iter().filter(|p| p.drug == Drug::Ras).collect();
        assert_eq!(ras.len(), 1);
        assert_eq!(ras[0].coverage_days, 30);
    }

    #[test]
    fn orphan_purchase_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let pat = write(dir.path(), "patients.csv", PATIENTS);
        let pur = write(
            dir.path(),
            "purchases.csv",
            "patient_id,drug,dispense_day,coverage_days\nX9,RAS,0,30\n",
        );
        let err = load_cohort(&pat, &pur).unwrap_err();
        match &err {
            Error::OrphanPurchases(ids) => assert_eq!(ids, &["X9".to_string()]),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("X9"));
    }

    #[test]
    fn malformed_row_names_file_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let pat = write(dir.path(), "patients.csv", PATIENTS);
        let pur = write(
            dir.path(),
            "purchases.csv",
            "patient_id,drug,dispense_day,coverage_days\np1,RAS,0,30\np1,XYZ,3,30\n",
        );
        let err = load_cohort(&pat, &pur).unwrap_err();
        match err {
            Error::Parse { file, line, column, .. } => {
                assert!(file.ends_with("purchases.csv"));
                assert_eq!(line, 3);
                assert_eq!(column, "drug");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_coverage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pur = write(
            dir.path(),
            "purchases.csv",
            "patient_id,drug,dispense_day,coverage_days\np1,RAS,0,0\n",
        );
        assert!(matches!(read_purchases(&pur), Err(Error::Parse { .. })));
    }

    #[test]
    fn patients_round_trip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let pat = write(dir.path(), "patients.csv", PATIENTS);
        let patients = read_patients(&pat).unwrap();
        let out = dir.path().join("out.csv");
        write_patients(&out, &patients).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), PATIENTS);
    }
}
