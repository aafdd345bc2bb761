use std::path::{Path, PathBuf};

use anyhow::Context;
use lmadhere::adherence::write_panels;
use lmadhere::cohort::{
    load_cohort, simulate_cohort, write_patients, write_purchases, write_truth, Cohort, SyntheticCohortConfig,
};
use lmadhere::decoding::{profile_table, ProfileLabel};
use lmadhere::lmm::{model_selection, read_model, write_model, write_selection_table, ModelDocument};
use lmadhere::pipeline::{
    build_adherence, build_data_panel, decode_cohort, read_profiles, survival_samples, write_decoded_paths,
    write_profile_table, write_profiles,
};
use lmadhere::survival::{analyse_profiles, write_km_curves, write_survival_report};

use crate::config::{ConfigError, Settings};

fn require_file(path: &Path, what: &str) -> Result<(), ConfigError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConfigError(format!("{what} file {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Loaded cohort after the analysis exclusions.
fn analysis_cohort(s: &Settings) -> anyhow::Result<Cohort> {
    require_file(&s.patients, "patients")?;
    require_file(&s.purchases, "purchases")?;
    let cohort = load_cohort(&s.patients, &s.purchases)?;
    let (kept, summary) = cohort.filter_for_analysis();
    println!(
        "cohort: {} patients, {} kept ({} died in the observation year, {} censored without purchases)",
        cohort.patients.len(),
        summary.kept,
        summary.died_in_observation,
        summary.censored_without_purchase
    );
    Ok(kept)
}

pub fn simulate(s: &Settings, seed: Option<u64>) -> anyhow::Result<()> {
    let Some(sim_path) = &s.simulator else {
        return Err(ConfigError("paths.simulator is required for `simulate`".into()).into());
    };
    require_file(sim_path, "simulator configuration")?;
    let text = std::fs::read_to_string(sim_path).with_context(|| format!("cannot read {}", sim_path.display()))?;
    let mut cfg = SyntheticCohortConfig::from_toml_str(&text).with_context(|| sim_path.display().to_string())?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let sim = simulate_cohort(&cfg)?;
    for p in [&s.patients, &s.purchases] {
        if let Some(parent) = p.parent() {
            create_dir(parent)?;
        }
    }
    create_dir(&s.output_dir)?;
    write_patients(&s.patients, &sim.patients)?;
    write_purchases(&s.purchases, &sim.purchases)?;
    write_truth(&s.out("truth.csv"), &sim.truth)?;
    let deaths = sim.patients.iter().filter(|p| p.event).count();
    let early = sim.truth.iter().filter(|t| t.died_in_observation).count();
    println!(
        "simulated {} patients ({} deaths, {} in the observation year) and {} purchases",
        sim.patients.len(),
        deaths,
        early,
        sim.purchases.len()
    );
    Ok(())
}

pub fn adherence(s: &Settings) -> anyhow::Result<()> {
    let cohort = analysis_cohort(s)?;
    let panels = build_adherence(&cohort)?;
    create_dir(&s.output_dir)?;
    write_panels(&s.out("adherence.csv"), &panels)?;
    for (j, drug) in lmadhere::cohort::Drug::ALL.iter().enumerate() {
        let users = panels.iter().filter(|p| p.channels[j].user).count();
        println!("{drug}: {users} users");
    }
    Ok(())
}

pub fn fit(s: &Settings) -> anyhow::Result<()> {
    let cohort = analysis_cohort(s)?;
    let panels = build_adherence(&cohort)?;
    let data = build_data_panel(&cohort.patients, &panels)?;
    println!("fitting {} subjects", data.subjects.len());
    let table = model_selection(&data, &s.selection)?;
    create_dir(&s.output_dir)?;
    write_selection_table(&s.out("selection.csv"), &table)?;
    write_model(&s.out("model.json"), &ModelDocument::from(&table.best))?;
    println!(
        "{:<6} {:>2} {:>5} {:>14} {:>14} {:>14}  covariates",
        "model", "k", "g", "loglik", "AIC", "BIC"
    );
    let num = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "failed".into());
    for (i, r) in table.rows.iter().enumerate() {
        println!(
            "{:<6} {:>2} {:>5} {:>14} {:>14} {:>14}  {}{}",
            r.label,
            r.k,
            r.free_params,
            num(r.loglik),
            num(r.aic),
            num(r.bic),
            r.covariates.join("+"),
            if i == table.selected_row { "  <- selected" } else { "" }
        );
    }
    println!("selected k = {}", table.selected_k);
    Ok(())
}

pub fn profile(s: &Settings, model: Option<&Path>) -> anyhow::Result<()> {
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| s.out("model.json"));
    require_file(&model_path, "model")?;
    let doc = read_model(&model_path)?;
    let cohort = analysis_cohort(s)?;
    let panels = build_adherence(&cohort)?;
    let data = build_data_panel(&cohort.patients, &panels)?;
    let decoded = decode_cohort(&doc.model, &data, s.profile.decode_mode)
        .with_context(|| format!("decoding with {}", model_path.display()))?;
    let labels: Vec<ProfileLabel> = decoded.iter().map(|d| d.label).collect();
    let table = profile_table(&labels, s.profile.min_count)?;
    create_dir(&s.output_dir)?;
    write_decoded_paths(&s.out("decoded_paths.csv"), &decoded)?;
    write_profiles(&s.out("profiles.csv"), &decoded)?;
    write_profile_table(&s.out("profile_table.csv"), &table)?;
    for row in &table {
        println!(
            "{} {:>7}{}  {}",
            row.label,
            row.count,
            if row.retained { " *" } else { "  " },
            row.label.description()
        );
    }
    println!("* retained (at least {} patients)", s.profile.min_count);
    Ok(())
}

pub fn survival(s: &Settings, profiles: Option<&Path>) -> anyhow::Result<()> {
    let profiles_path: PathBuf = profiles.map(Path::to_path_buf).unwrap_or_else(|| s.out("profiles.csv"));
    require_file(&profiles_path, "profiles")?;
    let assignments = read_profiles(&profiles_path)?;
    let cohort = analysis_cohort(s)?;
    let labels: Vec<ProfileLabel> = assignments.iter().map(|(_, l)| *l).collect();
    let retained: Vec<ProfileLabel> = profile_table(&labels, s.profile.min_count)?
        .into_iter()
        .filter(|r| r.retained)
        .map(|r| r.label)
        .collect();
    let samples = survival_samples(&cohort.patients, &assignments, s.time_origin)?;
    let (report, curves) = analyse_profiles(&samples, &retained, &s.survival)?;
    create_dir(&s.output_dir)?;
    write_km_curves(&s.out("km_curves.csv"), &curves)?;
    write_survival_report(&s.out("survival_report.json"), &report)?;
    println!(
        "log-rank: chi2 = {:.3}, df = {}, p = {}",
        report.logrank.statistic, report.logrank.df, report.logrank.p_value_text
    );
    for t in &report.cox.terms {
        println!(
            "HR {:<10} {:>7.3} [{:.3}, {:.3}]",
            t.name, t.hazard_ratio, t.ci_lower, t.ci_upper
        );
    }
    for r in &report.rmst {
        println!(
            "RMST {} - {} over {} years: {:.3} [{:.3}, {:.3}]",
            r.label, r.reference, r.result.tau, r.result.difference, r.result.ci_lower, r.result.ci_upper
        );
    }
    Ok(())
}

pub fn report(s: &Settings) -> anyhow::Result<()> {
    adherence(s)?;
    fit(s)?;
    profile(s, None)?;
    survival(s, None)
}
