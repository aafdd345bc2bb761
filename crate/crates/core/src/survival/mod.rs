//! Survival comparison across latent-behavioural profiles: Kaplan-Meier
//! curves, the G-group log-rank test, Efron Cox regression and restricted
//! mean survival time.

mod chisq;
mod cox;
mod km;
mod logrank;
mod rmst;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::ProfileLabel;
use crate::{Error, Result};

pub use chisq::{chi_square_sf, format_p_value, gamma_q};
pub use cox::{cox_fit, cox_partial_loglik, CoxFit, CoxTerm};
pub use km::{km_estimate, KmCurve};
pub use logrank::{logrank_test, LogrankResult};
pub use rmst::{rmst, rmst_difference, rmst_variance, RmstDifference};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    pub patient_id: String,
    /// Years since the start of the survival clock.
    pub time: f64,
    pub event: bool,
    pub group: ProfileLabel,
    pub age: f64,
    /// 1 for female, 0 for male.
    pub gender_f: f64,
    /// Comorbidity score summary (last observed month).
    pub mcs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOptions {
    /// RMST horizon in years.
    pub tau: f64,
    /// Adjust the Cox model for age, gender and comorbidity.
    pub adjust: bool,
}

impl Default for SurvivalOptions {
    fn default() -> Self {
        SurvivalOptions { tau: 7.0, adjust: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: ProfileLabel,
    pub n: usize,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogrankSummary {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// `p_value` as printed, with underflow shown as `< 1e-300`.
    pub p_value_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmstComparison {
    pub label: ProfileLabel,
    pub reference: ProfileLabel,
    #[serde(flatten)]
    pub result: RmstDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub groups: Vec<GroupSummary>,
    pub logrank: LogrankSummary,
    pub cox: CoxFit,
    pub rmst: Vec<RmstComparison>,
}

impl SurvivalReport {
    pub fn hazard_ratio(&self, label: ProfileLabel) -> Option<&CoxTerm> {
        self.cox.term(&profile_term(label))
    }

    pub fn rmst_vs_reference(&self, label: ProfileLabel) -> Option<&RmstDifference> {
        self.rmst.iter().find(|r| r.label == label).map(|r| &r.result)
    }
}

fn profile_term(label: ProfileLabel) -> String {
    format!("profile_{label}")
}

/// Kaplan-Meier curves, log-rank test, Cox model with profile `A` as the
/// reference and RMST differences against `A`, restricted to the
/// `retained` profiles. Samples in other profiles are ignored.
pub fn analyse_profiles(
    samples: &[SurvivalSample],
    retained: &[ProfileLabel],
    options: &SurvivalOptions,
) -> Result<(SurvivalReport, Vec<(ProfileLabel, KmCurve)>)> {
    let reference = ProfileLabel::A;
    let mut labels: Vec<ProfileLabel> = retained.to_vec();
    labels.sort();
    labels.dedup();
    let groups: Vec<(ProfileLabel, Vec<&SurvivalSample>)> = labels
        .iter()
        .map(|&l| (l, samples.iter().filter(|s| s.group == l).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if groups.len() < 2 {
        return Err(Error::Validation(format!(
            "survival comparison needs at least 2 retained profiles with subjects, found {}",
            groups.len()
        )));
    }
    if !groups.iter().any(|(l, _)| *l == reference) {
        return Err(Error::Validation(
            "reference profile A has no retained subjects; lower the retention threshold".into(),
        ));
    }
    let pairs = |v: &[&SurvivalSample]| v.iter().map(|s| (s.time, s.event)).collect::<Vec<_>>();
    let grouped: Vec<Vec<(f64, bool)>> = groups.iter().map(|(_, v)| pairs(v)).collect();

    let curves = groups
        .iter()
        .zip(&grouped)
        .map(|((l, _), g)| km_estimate(g).map(|c| (*l, c)))
        .collect::<Result<Vec<_>>>()?;

    let lr = logrank_test(&grouped)?;

    let mut names: Vec<String> = groups
        .iter()
        .filter(|(l, _)| *l != reference)
        .map(|(l, _)| profile_term(*l))
        .collect();
    if options.adjust {
        names.extend(["age", "gender_F", "mcs"].map(String::from));
    }
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut design = Vec::new();
    for (l, members) in &groups {
        for s in members {
            times.push(s.time);
            events.push(s.event);
            let mut row: Vec<f64> = groups
                .iter()
                .filter(|(g, _)| *g != reference)
                .map(|(g, _)| f64::from(u8::from(g == l)))
                .collect();
            if options.adjust {
                row.extend([s.age, s.gender_f, s.mcs]);
            }
            design.push(row);
        }
    }
    let cox = cox_fit(&times, &events, &design, &names)?;

    let ref_idx = groups.iter().position(|(l, _)| *l == reference).unwrap();
    let rmst = groups
        .iter()
        .zip(&grouped)
        .filter(|((l, _), _)| *l != reference)
        .map(|((l, _), g)| {
            rmst_difference(g, &grouped[ref_idx], options.tau).map(|result| RmstComparison {
                label: *l,
                reference,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = SurvivalReport {
        groups: groups
            .iter()
            .map(|(l, v)| GroupSummary {
                label: *l,
                n: v.len(),
                events: v.iter().filter(|s| s.event).count(),
            })
            .collect(),
        logrank: LogrankSummary {
            statistic: lr.statistic,
            df: lr.df,
            p_value: lr.p_value,
            p_value_text: format_p_value(lr.p_value),
        },
        cox,
        rmst,
    };
    Ok((report, curves))
}

/// Writes `group,time,survival,at_risk,events,greenwood_var`; each curve
/// starts with a row at time 0.
pub fn write_km_curves(path: &Path, curves: &[(ProfileLabel, KmCurve)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "group,time,survival,at_risk,events,greenwood_var").map_err(io)?;
    for (label, c) in curves {
        let n0 = c.at_risk.first().copied().unwrap_or(0);
        writeln!(w, "{label},0,1,{n0},0,0").map_err(io)?;
        for i in 0..c.times.len() {
            writeln!(
                w,
                "{label},{},{},{},{},{}",
                c.times[i], c.survival[i], c.at_risk[i], c.events[i], c.greenwood_var[i]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_survival_report(path: &Path, report: &SurvivalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: usize, time: f64, event: bool, group: ProfileLabel) -> SurvivalSample {
        SurvivalSample {
            patient_id: format!("p{id}"),
            time,
            event,
            group,
            age: 60.0 + (id % 17) as f64,
            gender_f: (id % 2) as f64,
            mcs: (id % 5) as f64,
        }
    }

    #[test]
    fn single_profile_is_rejected() {
        let s: Vec<_> = (0..10)
            .map(|i| sample(i, 1.0 + i as f64, true, ProfileLabel::A))
            .collect();
        let err = analyse_profiles(&s, &[ProfileLabel::A], &SurvivalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn missing_reference_is_rejected() {
        let mut s: Vec<_> = (0..10)
            .map(|i| sample(i, 1.0 + i as f64, true, ProfileLabel::B))
            .collect();
        s.extend((10..20).map(|i| sample(i, 1.0 + i as f64, true, ProfileLabel::D)));
        let err = analyse_profiles(&s, &[ProfileLabel::B, ProfileLabel::D], &SurvivalOptions::default()).unwrap_err();
        assert!(err.to_string().contains("reference profile A"));
    }

    #[test]
    fn report_has_one_comparison_per_non_reference_profile() {
        let mut s = Vec::new();
        for i in 0..60 {
            let g = [ProfileLabel::A, ProfileLabel::C, ProfileLabel::D][i % 3];
            let scale = match g {
                ProfileLabel::A => 1.0,
                ProfileLabel::C => 2.0,
                _ => 3.0,
            };
            s.push(sample(i, scale * (1.0 + (i * 7 % 11) as f64), i % 4 != 0, g));
        }
        // an unretained profile is ignored
        s.push(sample(99, 0.5, true, ProfileLabel::I));
        let opts = SurvivalOptions {
            tau: 5.0,
            adjust: false,
        };
        let retained = [ProfileLabel::A, ProfileLabel::C, ProfileLabel::D];
        let (report, curves) = analyse_profiles(&s, &retained, &opts).unwrap();
        assert_eq!(curves.len(), 3);
        assert_eq!(report.groups.iter().map(|g| g.n).sum::<usize>(), 60);
        assert_eq!(report.logrank.df, 2);
        assert_eq!(report.cox.terms.len(), 2);
        assert!(report.hazard_ratio(ProfileLabel::D).unwrap().hazard_ratio < 1.0);
        assert!(report.rmst_vs_reference(ProfileLabel::D).unwrap().difference > 0.0);
        assert!(report.rmst_vs_reference(ProfileLabel::A).is_none());
    }

    #[test]
    fn horizon_beyond_follow_up_is_reported() {
        let mut s: Vec<_> = (0..10)
            .map(|i| sample(i, 1.0 + i as f64 * 0.1, true, ProfileLabel::A))
            .collect();
        s.extend((10..20).map(|i| sample(i, 1.0 + i as f64 * 0.1, i % 2 == 0, ProfileLabel::B)));
        let opts = SurvivalOptions {
            tau: 50.0,
            adjust: false,
        };
        let err = analyse_profiles(&s, &[ProfileLabel::A, ProfileLabel::B], &opts).unwrap_err();
        assert!(err.to_string().contains("horizon"));
    }
}
