//! Two-stage model selection: number of states by minimum BIC among
//! covariate-free unrestricted models, then a logit-parametrised model at
//! that size with forward selection of covariates on both the initial and
//! transition probabilities.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{count_free_params, em_fit, DataPanel, EmOptions, FitResult, ModelSpec, TransitionForm};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub k_range: Vec<usize>,
    /// Candidate covariates for forward selection.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Fit the covariate-free logit model at the selected `k` even when no
    /// covariates are offered.
    #[serde(default = "default_true")]
    pub logit_baseline: bool,
    #[serde(default)]
    pub em: EmOptions,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub label: String,
    pub k: usize,
    pub transition_form: TransitionForm,
    pub covariates: Vec<String>,
    pub free_params: usize,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    /// Fit error message, if the row failed.
    pub error: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    /// `k` with the smallest BIC among the covariate-free unrestricted fits.
    pub selected_k: usize,
    pub selected_row: usize,
    pub best: FitResult,
}

fn row_from(label: String, spec: &ModelSpec, fit: &Result<FitResult>) -> SelectionRow {
    let mut row = SelectionRow {
        label,
        k: spec.states,
        transition_form: spec.transition_form,
        covariates: spec.init_covariates.clone(),
        free_params: count_free_params(spec),
        loglik: None,
        aic: None,
        bic: None,
        converged: false,
        error: None,
        selected: false,
    };
    match fit {
        Ok(f) => {
            row.loglik = Some(f.loglik);
            row.aic = Some(f.aic);
            row.bic = Some(f.bic);
            row.converged = f.converged;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn basic_spec(data: &DataPanel, k: usize, form: TransitionForm) -> ModelSpec {
    ModelSpec::new(k, data.drugs.clone(), data.categories.clone(), data.occasions, form)
}

pub fn model_selection(data: &DataPanel, options: &SelectionOptions) -> Result<SelectionTable> {
    if options.k_range.is_empty() {
        return Err(Error::Validation("model selection needs a non-empty k range".into()));
    }
    for c in &options.covariates {
        if !data.covariate_names.contains(c) {
            return Err(Error::Validation(format!(
                "covariate `{c}` is not available in the data"
            )));
        }
    }

    let stage_one: Vec<(ModelSpec, Result<FitResult>)> = options
        .k_range
        .par_iter()
        .map(|&k| {
            let spec = basic_spec(data, k, TransitionForm::UnrestrictedTimeVarying);
            let fit = em_fit(&spec, data, &options.em);
            (spec, fit)
        })
        .collect();

    let mut rows = Vec::new();
    let mut fits: Vec<Option<FitResult>> = Vec::new();
    for (spec, fit) in &stage_one {
        rows.push(row_from("M1".into(), spec, fit));
        fits.push(fit.as_ref().ok().cloned());
    }
    let basic_best = (0..rows.len())
        .filter(|&i| rows[i].bic.is_some())
        .min_by(|&a, &b| rows[a].bic.unwrap().total_cmp(&rows[b].bic.unwrap()).then(a.cmp(&b)));
    let Some(basic_best) = basic_best else {
        let msg = rows.iter().filter_map(|r| r.error.clone()).next().unwrap_or_default();
        return Err(Error::Computation(format!("every basic model failed to fit: {msg}")));
    };
    let selected_k = rows[basic_best].k;
    let mut selected = basic_best;

    if options.logit_baseline || !options.covariates.is_empty() {
        let spec = basic_spec(data, selected_k, TransitionForm::LogitHomogeneous);
        let fit = em_fit(&spec, data, &options.em);
        rows.push(row_from("M2".into(), &spec, &fit));
        fits.push(fit.as_ref().ok().cloned());
        if fit.is_ok() {
            selected = rows.len() - 1;
        }

        let mut chosen: Vec<String> = Vec::new();
        let mut label = 3;
        if fit.is_ok() {
            loop {
                let current_bic = rows[selected].bic.unwrap();
                let candidates: Vec<&String> = options.covariates.iter().filter(|c| !chosen.contains(c)).collect();
                if candidates.is_empty() {
                    break;
                }
                let results: Vec<(ModelSpec, Result<FitResult>)> = candidates
                    .par_iter()
                    .map(|c| {
                        let mut covs = chosen.clone();
                        covs.push((*c).clone());
                        let spec =
                            basic_spec(data, selected_k, TransitionForm::LogitHomogeneous).with_covariates(&covs);
                        let fit = em_fit(&spec, data, &options.em);
                        (spec, fit)
                    })
                    .collect();
                let mut round_best: Option<usize> = None;
                for (spec, fit) in &results {
                    rows.push(row_from(format!("M{label}"), spec, fit));
                    label += 1;
                    fits.push(fit.as_ref().ok().cloned());
                    let idx = rows.len() - 1;
                    if let Some(b) = rows[idx].bic {
                        if round_best.is_none_or(|r| b < rows[r].bic.unwrap()) {
                            round_best = Some(idx);
                        }
                    }
                }
                match round_best {
                    Some(idx) if rows[idx].bic.unwrap() < current_bic => {
                        chosen = rows[idx].covariates.clone();
                        selected = idx;
                    }
                    _ => break,
                }
            }
        }
    }
    rows[selected].selected = true;
    let best = fits[selected].clone().expect("selected row has a fit");
    Ok(SelectionTable {
        rows,
        selected_k,
        selected_row: selected,
        best,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes the selection table as comma-separated text.
pub fn write_selection_table(path: &Path, table: &SelectionTable) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "model,form,k,covariates,g,loglik,aic,bic,converged,selected,error").map_err(io)?;
    for r in &table.rows {
        let form = match r.transition_form {
            TransitionForm::UnrestrictedTimeVarying => "unrestricted",
            TransitionForm::LogitHomogeneous => "logit",
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            form,
            r.k,
            r.covariates.join("+"),
            r.free_params,
            opt(r.loglik),
            opt(r.aic),
            opt(r.bic),
            r.converged as u8,
            r.selected as u8,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
