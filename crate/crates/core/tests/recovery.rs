//! Parameter recovery and state-count selection on panels drawn directly
//! from a known latent Markov model.

use lmadhere::lmm::{
    em_fit, mean_transition_matrix, model_selection, simulate_responses, Columns, DataPanel, EmOptions,
    LatentParameters, LmModel, LmmParameters, ModelSpec, SelectionOptions, Subject, TransitionForm,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn truth() -> LmModel {
    let drugs = vec!["RAS".to_string(), "BB".into(), "MRA".into()];
    let spec = ModelSpec::new(3, drugs, vec![3; 3], 12, TransitionForm::UnrestrictedTimeVarying);
    // phi[j][y][u]
    let phi = vec![
        vec![vec![0.75, 0.15, 0.05], vec![0.20, 0.70, 0.15], vec![0.05, 0.15, 0.80]],
        vec![vec![0.80, 0.20, 0.10], vec![0.15, 0.60, 0.10], vec![0.05, 0.20, 0.80]],
        vec![vec![0.70, 0.10, 0.05], vec![0.20, 0.75, 0.25], vec![0.10, 0.15, 0.70]],
    ];
    let tau = vec![vec![0.85, 0.10, 0.05], vec![0.05, 0.88, 0.07], vec![0.02, 0.06, 0.92]];
    LmModel::new(
        spec,
        LmmParameters {
            phi,
            latent: LatentParameters::Unrestricted {
                initial: vec![0.3, 0.4, 0.3],
                transitions: vec![tau; 11],
            },
        },
    )
    .unwrap()
}

pub fn simulate(model: &LmModel, n: usize, seed: u64) -> DataPanel {
    let mut panel = DataPanel {
        drugs: model.spec.drugs.clone(),
        categories: model.spec.categories.clone(),
        occasions: 12,
        covariate_names: vec![],
        subjects: vec![],
    };
    let cols = Columns::resolve(&model.spec, &panel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let template = Subject {
            id: format!("s{i}"),
            responses: (0..3).map(|j| (i % 5 != j).then(|| vec![0; 12])).collect(),
            baseline: vec![],
            time_varying: vec![vec![]; 11],
        };
        let (_, s) = simulate_responses(model, &cols, &template, &mut rng);
        panel.subjects.push(s);
    }
    panel
}

#[test]
fn recovers_emissions_and_mean_transitions() {
    let truth = truth();
    let data = simulate(&truth, 2000, 2024);
    let options = EmOptions {
        n_random_starts: 3,
        seed: 1,
        ..EmOptions::default()
    };
    let fit = em_fit(&truth.spec, &data, &options).unwrap();
    assert!(fit.is_monotone(1e-8));
    let mut phi_err: f64 = 0.0;
    for (a, b) in fit
        .model
        .params
        .phi
        .iter()
        .flatten()
        .flatten()
        .zip(truth.params.phi.iter().flatten().flatten())
    {
        phi_err = phi_err.max((a - b).abs());
    }
    let m_hat = mean_transition_matrix(&fit.model, &data).unwrap();
    let m_true = mean_transition_matrix(&truth, &data).unwrap();
    let tau_err = m_hat
        .iter()
        .flatten()
        .zip(m_true.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |phi error| = {phi_err:.4}, max |mean tau error| = {tau_err:.4}");
    assert!(phi_err < 0.03);
    assert!(tau_err < 0.05);
}

#[test]
fn bic_selects_the_true_number_of_states() {
    let truth = truth();
    let data = simulate(&truth, 2000, 2024);
    let options = SelectionOptions {
        k_range: (1..=5).collect(),
        covariates: vec![],
        logit_baseline: false,
        em: EmOptions {
            n_random_starts: 2,
            seed: 1,
            ..EmOptions::default()
        },
    };
    let table = model_selection(&data, &options).unwrap();
    for r in &table.rows {
        println!("k = {} bic = {:?}", r.k, r.bic);
    }
    assert_eq!(table.selected_k, 3);
}
