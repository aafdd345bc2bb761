use serde::{Deserialize, Serialize};

use crate::error::ensure;
use crate::Result;

/// Product-limit survival curve evaluated at the distinct event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    /// Greenwood variance of the survival estimate.
    pub greenwood_var: Vec<f64>,
    /// Largest observed time (event or censoring).
    pub last_time: f64,
}

impl KmCurve {
    /// Right-continuous step function value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

pub(crate) fn sorted_times(samples: &[(f64, bool)]) -> Result<Vec<(f64, bool)>> {
    ensure!(!samples.is_empty(), "survival estimate needs at least one subject");
    ensure!(
        samples.iter().all(|(t, _)| t.is_finite() && *t > 0.0),
        "survival times must be finite and positive"
    );
    let mut v = samples.to_vec();
    // events before censorings at equal times
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    Ok(v)
}

/// Kaplan-Meier estimate from `(time, event)` pairs. Subjects censored at an
/// event time are still at risk for that event.
pub fn km_estimate(samples: &[(f64, bool)]) -> Result<KmCurve> {
    let sorted = sorted_times(samples)?;
    let mut curve = KmCurve {
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        events: vec![],
        greenwood_var: vec![],
        last_time: sorted.last().unwrap().0,
    };
    let mut at_risk = sorted.len();
    let mut s = 1.0;
    let mut gw_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut d = 0;
        let mut block = 0;
        while i + block < sorted.len() && sorted[i + block].0 == t {
            d += sorted[i + block].1 as usize;
            block += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            let var = if d < at_risk {
                gw_sum += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
                s * s * gw_sum
            } else {
                0.0
            };
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
            curve.greenwood_var.push(var);
        }
        at_risk -= block;
        i += block;
    }
    Ok(curve)
}
