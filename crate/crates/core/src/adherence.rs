//! Time-varying three-level adherence from purchase events.
//!
//! Each purchase covers `[dispense_day, dispense_day + coverage_days)`.
//! Overlapping fills are merged as a union of covered days (no stockpiling
//! carry-over). For month `t` the cumulative ratio is the number of covered
//! days in `[0, 30 t)` divided by `30 t`, which is then cut at 0.25 and 0.8.

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Drug, PatientRecord, PurchaseEvent};
use crate::error::ensure;
use crate::{Error, Result, DAYS_PER_MONTH, MONTHS, PANEL_DAYS, USER_WINDOW_DAYS};

/// Distinct days covered by one drug inside the panel window `[0, 360)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageTimeline {
    pub drug: Drug,
    covered: [bool; PANEL_DAYS as usize],
}

impl CoverageTimeline {
    pub fn empty(drug: Drug) -> Self {
        CoverageTimeline {
            drug,
            covered: [false; PANEL_DAYS as usize],
        }
    }

    pub fn add(&mut self, dispense_day: u32, coverage_days: u32) {
        let start = dispense_day.min(PANEL_DAYS);
        let end = dispense_day.saturating_add(coverage_days).min(PANEL_DAYS);
        for d in start..end {
            self.covered[d as usize] = true;
        }
    }

    /// Covered days in ascending order.
    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        self.covered
            .iter()
            .enumerate()
            .filter(|(_, c)| **c)
            .map(|(d, _)| d as u32)
    }

    pub fn len(&self) -> usize {
        self.covered.iter().filter(|c| **c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Covered days in `[0, end)`.
    pub fn covered_before(&self, end: u32) -> u32 {
        self.covered[..end.min(PANEL_DAYS) as usize]
            .iter()
            .filter(|c| **c)
            .count() as u32
    }
}

/// Builds the covered-day set for events of a single patient and drug.
pub fn build_timeline(drug: Drug, events: &[PurchaseEvent]) -> Result<CoverageTimeline> {
    let mut timeline = CoverageTimeline::empty(drug);
    if let Some(first) = events.first() {
        for e in events {
            ensure!(
                e.patient_id == first.patient_id,
                "timeline mixes patients `{}` and `{}`",
                first.patient_id,
                e.patient_id
            );
            ensure!(e.drug == drug, "timeline for {drug} received a {} purchase", e.drug);
        }
    }
    for e in events {
        timeline.add(e.dispense_day, e.coverage_days);
    }
    Ok(timeline)
}

/// Exact rational `covered / elapsed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRatio {
    pub covered: u32,
    pub elapsed: u32,
}

impl CoverageRatio {
    pub fn value(self) -> f64 {
        self.covered as f64 / self.elapsed as f64
    }

    /// Level computed in integer arithmetic, free of floating-point rounding
    /// at the 0.25 and 0.8 cut points.
    pub fn level(self) -> AdherenceLevel {
        let (c, e) = (self.covered as u64, self.elapsed as u64);
        if 4 * c < e {
            AdherenceLevel::Low
        } else if 5 * c < 4 * e {
            AdherenceLevel::Middle
        } else {
            AdherenceLevel::High
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdherenceLevel {
    Low = 0,
    Middle = 1,
    High = 2,
}

impl AdherenceLevel {
    pub const ALL: [AdherenceLevel; 3] = [AdherenceLevel::Low, AdherenceLevel::Middle, AdherenceLevel::High];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Cumulative coverage ratio at month `t` (1-based).
pub fn cumulative_ratio(timeline: &CoverageTimeline, t: usize) -> Result<CoverageRatio> {
    ensure!((1..=MONTHS).contains(&t), "month index {t} outside 1..={MONTHS}");
    let elapsed = DAYS_PER_MONTH * t as u32;
    Ok(CoverageRatio {
        covered: timeline.covered_before(elapsed),
        elapsed,
    })
}

/// Maps a ratio in `[0, 1]` to its level: `[0, .25)`, `[.25, .8)`, `[.8, 1]`.
pub fn adherence_level(ratio: f64) -> Result<AdherenceLevel> {
    ensure!(
        ratio.is_finite() && (0.0..=1.0).contains(&ratio),
        "ratio {ratio} outside [0, 1]"
    );
    Ok(if ratio < 0.25 {
        AdherenceLevel::Low
    } else if ratio < 0.8 {
        AdherenceLevel::Middle
    } else {
        AdherenceLevel::High
    })
}

/// Range of cumulative covered days in `[0, 30 t)` that yields `level` at
/// month `t`.
pub fn covered_days_band(level: AdherenceLevel, t: usize) -> RangeInclusive<u32> {
    let elapsed = DAYS_PER_MONTH * t as u32;
    // smallest c with 4c >= elapsed, smallest c with 5c >= 4 elapsed
    let mid_lo = elapsed.div_ceil(4);
    let high_lo = (4 * elapsed).div_ceil(5);
    match level {
        AdherenceLevel::Low => 0..=mid_lo - 1,
        AdherenceLevel::Middle => mid_lo..=high_lo - 1,
        AdherenceLevel::High => high_lo..=elapsed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugChannel {
    pub drug: Drug,
    pub user: bool,
    pub ratios: Vec<CoverageRatio>,
    /// `None` for non-users: the channel is missing, not zero.
    pub levels: Option<Vec<AdherenceLevel>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdherencePanel {
    pub patient_id: String,
    pub channels: Vec<DrugChannel>,
}

impl AdherencePanel {
    pub fn channel(&self, drug: Drug) -> &DrugChannel {
        &self.channels[drug.index()]
    }
}

/// Builds the monthly panel of one patient. A drug is "used" when at least
/// one purchase falls in `[0, 365)`; levels come from the `[0, 360)` window.
pub fn build_panel(patient: &PatientRecord, purchases: &[&PurchaseEvent]) -> Result<AdherencePanel> {
    let mut channels = Vec::with_capacity(Drug::ALL.len());
    for drug in Drug::ALL {
        let mut timeline = CoverageTimeline::empty(drug);
        let mut user = false;
        for p in purchases.iter().filter(|p| p.drug == drug) {
            ensure!(
                p.patient_id == patient.patient_id,
                "purchase of `{}` passed to panel of `{}`",
                p.patient_id,
                patient.patient_id
            );
            user |= p.dispense_day < USER_WINDOW_DAYS;
            timeline.add(p.dispense_day, p.coverage_days);
        }
        let ratios = (1..=MONTHS)
            .map(|t| cumulative_ratio(&timeline, t))
            .collect::<Result<Vec<_>>>()?;
        let levels = user.then(|| ratios.iter().map(|r| r.level()).collect());
        channels.push(DrugChannel {
            drug,
            user,
            ratios,
            levels,
        });
    }
    Ok(AdherencePanel {
        patient_id: patient.patient_id.clone(),
        channels,
    })
}

/// Writes `patient_id,drug,user,month,ratio,level` rows; `level` is blank
/// for non-users.
pub fn write_panels(path: &Path, panels: &[AdherencePanel]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "patient_id,drug,user,month,ratio,level").map_err(io)?;
    for panel in panels {
        for ch in &panel.channels {
            for (t, r) in ch.ratios.iter().enumerate() {
                let level = ch.levels.as_ref().map(|l| l[t].code().to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    panel.patient_id,
                    ch.drug,
                    ch.user as u8,
                    t + 1,
                    r.value(),
                    level
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    use crate::cohort::Gender;

    fn ev(drug: Drug, day: u32, cov: u32) -> PurchaseEvent {
        PurchaseEvent {
            patient_id: "p".into(),
            drug,
            dispense_day: day,
            coverage_days: cov,
        }
    }

    fn patient() -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            age: 70,
            gender: Gender::M,
            mcs: [0; MONTHS],
            followup_days: 2000,
            event: false,
        }
    }

    #[test]
    fn single_interval() {
        let tl = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 30)]).unwrap();
        assert_eq!(tl.len(), 30);
    }

    #[test]
    fn overlap_counts_distinct_days() {
        let tl = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 30), ev(Drug::Ras, 15, 30)]).unwrap();
        assert_eq!(tl.len(), 45);
        let nested = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 30), ev(Drug::Ras, 10, 10)]).unwrap();
        assert_eq!(nested.len(), 30);
    }

    #[test]
    fn coverage_is_clipped_to_panel() {
        let tl = build_timeline(Drug::Bb, &[ev(Drug::Bb, 350, 60)]).unwrap();
        assert_eq!(tl.len(), 10);
        assert_eq!(tl.days().last(), Some(359));
    }

    #[test]
    fn mixed_drugs_rejected() {
        assert!(build_timeline(Drug::Ras, &[ev(Drug::Bb, 0, 30)]).is_err());
    }

    #[test]
    fn cumulative_ratio_examples() {
        let full = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 360)]).unwrap();
        assert_eq!(cumulative_ratio(&full, 12).unwrap().value(), 1.0);

        let one_month = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 30)]).unwrap();
        assert_eq!(cumulative_ratio(&one_month, 1).unwrap().value(), 1.0);
        assert_eq!(cumulative_ratio(&one_month, 2).unwrap().value(), 0.5);

        let overlap = build_timeline(Drug::Ras, &[ev(Drug::Ras, 0, 30), ev(Drug::Ras, 15, 30)]).unwrap();
        // brute force: days 0..45 are covered, all inside [0, 60)
        let brute = (0..60u32).filter(|d| *d < 45).count() as f64 / 60.0;
        assert_eq!(cumulative_ratio(&overlap, 2).unwrap().value(), brute);
        assert_eq!(brute, 0.75);

        assert!(cumulative_ratio(&full, 0).is_err());
        assert!(cumulative_ratio(&full, 13).is_err());
    }

    #[test]
    fn level_boundaries() {
        assert_eq!(adherence_level(0.25).unwrap(), AdherenceLevel::Middle);
        assert_eq!(adherence_level(0.8).unwrap(), AdherenceLevel::High);
        assert_eq!(adherence_level(0.0).unwrap(), AdherenceLevel::Low);
        assert_eq!(adherence_level(1.0).unwrap(), AdherenceLevel::High);
        assert_eq!(adherence_level(0.249_999_999).unwrap(), AdherenceLevel::Low);
        assert_eq!(adherence_level(0.799_999_999).unwrap(), AdherenceLevel::Middle);
        assert!(adherence_level(-0.01).is_err());
        assert!(adherence_level(1.01).is_err());
        assert!(adherence_level(f64::NAN).is_err());
    }

    #[test]
    fn exact_level_agrees_with_float_level_on_every_count() {
        for t in 1..=MONTHS as u32 {
            let elapsed = 30 * t;
            for covered in 0..=elapsed {
                let r = CoverageRatio { covered, elapsed };
                assert_eq!(r.level(), adherence_level(r.value()).unwrap(), "{covered}/{elapsed}");
            }
        }
    }

    #[test]
    fn bands_partition_counts() {
        for t in 1..=MONTHS {
            let elapsed = 30 * t as u32;
            for covered in 0..=elapsed {
                let r = CoverageRatio { covered, elapsed };
                for level in AdherenceLevel::ALL {
                    assert_eq!(covered_days_band(level, t).contains(&covered), r.level() == level);
                }
            }
        }
    }

    #[test]
    fn non_user_channel_is_missing() {
        let p = patient();
        let ras = ev(Drug::Ras, 0, 360);
        let panel = build_panel(&p, &[&ras]).unwrap();
        let mra = panel.channel(Drug::Mra);
        assert!(!mra.user);
        assert!(mra.levels.is_none());
        let ras = panel.channel(Drug::Ras);
        assert_eq!(ras.levels.as_ref().unwrap(), &vec![AdherenceLevel::High; MONTHS]);
    }

    #[test]
    fn purchase_after_panel_inside_user_window() {
        let p = patient();
        let late = ev(Drug::Ras, 362, 30);
        let panel = build_panel(&p, &[&late]).unwrap();
        let ch = panel.channel(Drug::Ras);
        assert!(ch.user);
        assert!(ch.ratios.iter().all(|r| r.covered == 0));
        assert_eq!(ch.levels.as_ref().unwrap(), &vec![AdherenceLevel::Low; MONTHS]);

        let outside = ev(Drug::Ras, 365, 30);
        let panel = build_panel(&p, &[&outside]).unwrap();
        assert!(!panel.channel(Drug::Ras).user);
    }

    fn events_strategy() -> impl Strategy<Value = Vec<(u32, u32)>> {
        prop::collection::vec((0u32..400, 1u32..120), 0..8)
    }

    proptest! {
        #[test]
        fn covered_days_monotone_and_adding_never_lowers(events in events_strategy(), extra in (0u32..400, 1u32..120)) {
            let mut tl = CoverageTimeline::empty(Drug::Bb);
            for (d, c) in &events {
                tl.add(*d, *c);
            }
            let before: Vec<_> = (1..=MONTHS).map(|t| cumulative_ratio(&tl, t).unwrap()).collect();
            for w in before.windows(2) {
                prop_assert!(w[1].covered >= w[0].covered);
            }
            for r in &before {
                prop_assert!(r.value() <= 1.0);
            }
            tl.add(extra.0, extra.1);
            for (t, old) in before.iter().enumerate() {
                let new = cumulative_ratio(&tl, t + 1).unwrap();
                prop_assert!(new.value() >= old.value());
                prop_assert!(new.level() >= old.level());
            }
        }

        #[test]
        fn level_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adherence_level(lo).unwrap() <= adherence_level(hi).unwrap());
        }
    }
}
