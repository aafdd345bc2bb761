use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chisq::chi_square_sf;
use crate::error::ensure;
use crate::linalg::pinv_symmetric;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogrankResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    /// Covariance of observed minus expected.
    pub covariance: Vec<Vec<f64>>,
}

/// G-group log-rank test. The statistic is the quadratic form of the
/// observed-minus-expected vector in a generalised inverse of its
/// covariance; `df = G - 1`.
pub fn logrank_test(groups: &[Vec<(f64, bool)>]) -> Result<LogrankResult> {
    let g = groups.len();
    ensure!(g >= 2, "log-rank test needs at least two groups");
    ensure!(
        groups.iter().all(|grp| !grp.is_empty()),
        "every log-rank group needs at least one subject"
    );
    let mut all: Vec<(f64, bool, usize)> = Vec::new();
    for (gi, grp) in groups.iter().enumerate() {
        for &(t, e) in grp {
            ensure!(t.is_finite() && t > 0.0, "survival times must be finite and positive");
            all.push((t, e, gi));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut at_risk: Vec<f64> = groups.iter().map(|grp| grp.len() as f64).collect();
    let mut observed = vec![0.0; g];
    let mut expected = vec![0.0; g];
    let mut cov = DMatrix::<f64>::zeros(g, g);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let mut deaths = vec![0.0; g];
        let mut leaving = vec![0.0; g];
        while i < all.len() && all[i].0 == t {
            let (_, e, gi) = all[i];
            leaving[gi] += 1.0;
            if e {
                deaths[gi] += 1.0;
            }
            i += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for a in 0..g {
                observed[a] += deaths[a];
                expected[a] += d * at_risk[a] / n;
            }
            if n > 1.0 {
                let f = d * (n - d) / (n - 1.0);
                for a in 0..g {
                    for b in 0..g {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        cov[(a, b)] += f * (at_risk[a] / n) * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for a in 0..g {
            at_risk[a] -= leaving[a];
        }
    }
    let diff = DVector::from_iterator(g, observed.iter().zip(&expected).map(|(o, e)| o - e));
    let pinv = pinv_symmetric(&cov, 1e-10);
    let statistic = (diff.transpose() * &pinv * &diff)[(0, 0)].max(0.0);
    let df = g - 1;
    Ok(LogrankResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
        observed,
        expected,
        covariance: (0..g).map(|a| (0..g).map(|b| cov[(a, b)]).collect()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_groups() {
        let grp = vec![(1.0, true), (2.0, false), (3.0, true), (4.0, true)];
        let r = logrank_test(&[grp.clone(), grp]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn six_subject_hand_table() {
        // group 0: 1(event) 3(event) 5(censored); group 1: 2(event) 4(event) 6(event)
        let g0 = vec![(1.0, true), (3.0, true), (5.0, false)];
        let g1 = vec![(2.0, true), (4.0, true), (6.0, true)];
        let r = logrank_test(&[g0, g1]).unwrap();
        // hand O/E table, rows (n0, n1, d0, d1):
        // t=1 (3,3,1,0): E0 = 1/2, V = 1*5/5 * 1/2*1/2 = 0.25
        // t=2 (2,3,0,1): E0 = 2/5, V = 4/4 * 2/5*3/5 = 0.24
        // t=3 (2,2,1,0): E0 = 1/2, V = 3/3 * 1/4 = 0.25
        // t=4 (1,2,0,1): E0 = 1/3, V = 2/2 * 2/9
        // t=6 (0,1,0,1): E0 = 0, V = 0
        let e0 = 0.5 + 0.4 + 0.5 + 1.0 / 3.0;
        let v = 0.25 + 0.24 + 0.25 + 2.0 / 9.0;
        let o0 = 2.0;
        assert!((r.expected[0] - e0).abs() < 1e-12);
        assert!((r.observed[0] - o0).abs() < 1e-12);
        assert!((r.covariance[0][0] - v).abs() < 1e-12);
        assert!((r.statistic - (o0 - e0).powi(2) / v).abs() < 1e-12);
        assert_eq!(r.df, 1);
    }

    #[test]
    fn rejects_empty_group() {
        assert!(logrank_test(&[vec![(1.0, true)], vec![]]).is_err());
        assert!(logrank_test(&[vec![(1.0, true)]]).is_err());
    }

    fn groups_strategy(n_groups: usize) -> impl Strategy<Value = Vec<Vec<(f64, bool)>>> {
        prop::collection::vec(prop::collection::vec((1u32..30, any::<bool>()), 1..25), n_groups).prop_map(|gs| {
            gs.into_iter()
                .map(|g| g.into_iter().map(|(t, e)| (t as f64, e)).collect())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn two_group_statistic_is_z_squared(groups in groups_strategy(2)) {
            let r = logrank_test(&groups).unwrap();
            let v = r.covariance[0][0];
            if v > 1e-9 {
                let z = (r.observed[0] - r.expected[0]) / v.sqrt();
                prop_assert!((r.statistic - z * z).abs() < 1e-9 * (1.0 + z * z));
            }
        }

        #[test]
        fn relabeling_groups_keeps_statistic(groups in groups_strategy(3)) {
            let a = logrank_test(&groups).unwrap();
            let permuted = vec![groups[2].clone(), groups[0].clone(), groups[1].clone()];
            let b = logrank_test(&permuted).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-8 * (1.0 + a.statistic));
        }
    }
}
