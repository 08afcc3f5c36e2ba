use serde::{Deserialize, Serialize};

use super::StatsError;

/// Product-limit survival curve. `survival[k]` holds on `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

impl KaplanMeier {
    /// `S(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Left limit `S(t-)`.
    pub fn before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan–Meier estimate. Subjects censored at an event time count as at
/// risk at that time.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> KaplanMeier {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&i, &j| times[i].total_cmp(&times[j]));
    let mut at_risk = times.len() as f64;
    let mut s = 1.0;
    let mut km = KaplanMeier {
        times: Vec::new(),
        survival: Vec::new(),
    };
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        while k < order.len() && times[order[k]] == t {
            if events[order[k]] {
                deaths += 1.0;
            }
            leaving += 1.0;
            k += 1;
        }
        if deaths > 0.0 {
            s *= 1.0 - deaths / at_risk;
            km.times.push(t);
            km.survival.push(s);
        }
        at_risk -= leaving;
    }
    km
}

/// Weighted status of each subject at horizon `t`: `Some((survived, weight))`
/// for subjects whose status is known, `None` for those censored before `t`.
fn ipcw_weights(times: &[f64], events: &[bool], t: f64) -> Result<Vec<Option<(bool, f64)>>, StatsError> {
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    let censoring = kaplan_meier(times, &flipped);
    times
        .iter()
        .zip(events)
        .map(|(&ti, &ei)| {
            let g = if ti <= t && ei {
                censoring.before(ti)
            } else if ti > t {
                censoring.at(t)
            } else {
                return Ok(None);
            };
            if g <= 0.0 {
                return Err(StatsError::DegenerateSample(format!("censoring survival is 0 at {ti}")));
            }
            Ok(Some((ti > t, 1.0 / g)))
        })
        .collect()
}

fn check_inputs(probs: &[f64], times: &[f64], events: &[bool]) -> Result<(), StatsError> {
    if probs.len() != times.len() || times.len() != events.len() {
        return Err(StatsError::DimensionMismatch(format!(
            "{} probabilities, {} times, {} events",
            probs.len(),
            times.len(),
            events.len()
        )));
    }
    if times.is_empty() {
        return Err(StatsError::DegenerateSample("no subjects".into()));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(StatsError::DegenerateSample("survival probability outside [0, 1]".into()));
    }
    Ok(())
}

/// Inverse-probability-of-censoring weighted Brier score at horizon `t`.
/// `surv_at_t[i]` is the predicted probability that subject `i` survives past `t`.
pub fn brier_ipcw(surv_at_t: &[f64], times: &[f64], events: &[bool], t: f64) -> Result<f64, StatsError> {
    check_inputs(surv_at_t, times, events)?;
    let w = ipcw_weights(times, events, t)?;
    let total: f64 = w
        .iter()
        .zip(surv_at_t)
        .filter_map(|(w, &s)| w.map(|(alive, g)| g * if alive { (1.0 - s).powi(2) } else { s * s }))
        .sum();
    Ok(total / times.len() as f64)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// IPCW binomial log-likelihood at horizon `t`, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. Higher is better.
pub fn binomial_ll(surv_at_t: &[f64], times: &[f64], events: &[bool], t: f64) -> Result<f64, StatsError> {
    check_inputs(surv_at_t, times, events)?;
    let w = ipcw_weights(times, events, t)?;
    let total: f64 = w
        .iter()
        .zip(surv_at_t)
        .filter_map(|(w, &s)| {
            let s = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            w.map(|(alive, g)| g * if alive { s.ln() } else { (1.0 - s).ln() })
        })
        .sum();
    Ok(total / times.len() as f64)
}

/// Median of the observed times, the default evaluation horizon.
pub fn median_time(times: &[f64]) -> f64 {
    let mut s = times.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
