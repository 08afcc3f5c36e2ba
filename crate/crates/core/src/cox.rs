//! Cox proportional hazards: Breslow partial likelihood, Newton-Raphson
//! fitting and hazard-ratio reporting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoxError {
    #[error("no events: the partial likelihood is undefined")]
    NoEvents,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least {needed} events for {covariates} covariates, found {events}")]
    InsufficientEvents {
        events: usize,
        covariates: usize,
        needed: usize,
    },
    #[error("covariate column {0} is constant")]
    ConstantColumn(usize),
    #[error("observed information matrix is singular")]
    SingularFit,
    #[error("no convergence after {iterations} iterations (max |score| = {max_score:e}, beta = {beta:?})")]
    ConvergenceFailure {
        iterations: usize,
        max_score: f64,
        beta: Vec<f64>,
    },
}

/// Event-time groups of one stratum, times descending.
struct RiskGroups {
    /// `(time, member indices, event indices)` per distinct time, descending.
    groups: Vec<(f64, Vec<usize>, Vec<usize>)>,
}

impl RiskGroups {
    fn new(idx: &[usize], times: &[f64], events: &[bool]) -> Self {
        let mut order = idx.to_vec();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
        let mut groups: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some((t, members, evs)) if *t == times[i] => {
                    members.push(i);
                    if events[i] {
                        evs.push(i);
                    }
                }
                _ => groups.push((times[i], vec![i], if events[i] { vec![i] } else { vec![] })),
            }
        }
        RiskGroups { groups }
    }
}

fn strata_indices(strata: &[usize]) -> Vec<Vec<usize>> {
    let k = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &s) in strata.iter().enumerate() {
        out[s].push(i);
    }
    out.retain(|v| !v.is_empty());
    out
}

/// Negative log partial likelihood (Breslow ties), summed over strata, with
/// its gradient with respect to each risk score.
pub fn cox_pl_loss(
    risk_scores: &[f64],
    times: &[f64],
    events: &[bool],
    strata: &[usize],
) -> Result<(f64, Vec<f64>), CoxError> {
    let n = risk_scores.len();
    if times.len() != n || events.len() != n || strata.len() != n {
        return Err(CoxError::LengthMismatch(format!(
            "{n} scores, {} times, {} events, {} strata",
            times.len(),
            events.len(),
            strata.len()
        )));
    }
    if !events.iter().any(|&e| e) {
        return Err(CoxError::NoEvents);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for idx in strata_indices(strata) {
        let shift = idx.iter().map(|&i| risk_scores[i]).fold(f64::NEG_INFINITY, f64::max);
        let rg = RiskGroups::new(&idx, times, events);
        // Running risk-set sum and per-group 1/R contributions.
        let mut r = 0.0;
        let mut inv = Vec::with_capacity(rg.groups.len());
        for (_, members, evs) in &rg.groups {
            r += members.iter().map(|&i| (risk_scores[i] - shift).exp()).sum::<f64>();
            let d = evs.len() as f64;
            if !evs.is_empty() {
                loss += d * (r.ln() + shift) - evs.iter().map(|&i| risk_scores[i]).sum::<f64>();
            }
            inv.push(d / r);
        }
        // Ascending in time: cumulative sum over event groups with t_i <= t_k.
        let mut acc = 0.0;
        for ((_, members, _), w) in rg.groups.iter().zip(&inv).rev() {
            acc += w;
            for &k in members {
                grad[k] = (risk_scores[k] - shift).exp() * acc - f64::from(u8::from(events[k]));
            }
        }
    }
    Ok((loss, grad))
}

/// Breslow estimate of the cumulative baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Cumulative hazard just after each time.
    pub cumulative: Vec<f64>,
}

impl BaselineHazard {
    pub fn fit(risk_scores: &[f64], times: &[f64], events: &[bool]) -> Self {
        let idx: Vec<usize> = (0..times.len()).collect();
        let rg = RiskGroups::new(&idx, times, events);
        let mut r = 0.0;
        let mut steps = Vec::new();
        for (t, members, evs) in &rg.groups {
            r += members.iter().map(|&i| risk_scores[i].exp()).sum::<f64>();
            if !evs.is_empty() {
                steps.push((*t, evs.len() as f64 / r));
            }
        }
        steps.reverse();
        let mut acc = 0.0;
        let mut out = BaselineHazard {
            times: Vec::with_capacity(steps.len()),
            cumulative: Vec::with_capacity(steps.len()),
        };
        for (t, h) in steps {
            acc += h;
            out.times.push(t);
            out.cumulative.push(acc);
        }
        out
    }

    /// `H0(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Survival probability `exp(-H0(t) exp(risk))`.
    pub fn survival(&self, t: f64, risk_score: f64) -> f64 {
        (-self.at(t) * risk_score.exp()).exp()
    }
}

/// Martingale residuals `event - H0(time) exp(risk)`.
pub fn martingale_residuals(risk_scores: &[f64], times: &[f64], events: &[bool], baseline: &BaselineHazard) -> Vec<f64> {
    risk_scores
        .iter()
        .zip(times)
        .zip(events)
        .map(|((&eta, &t), &e)| f64::from(u8::from(e)) - baseline.at(t) * eta.exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    /// Inverse observed information, `p x p` row-major.
    pub covariance: Vec<f64>,
    pub n_events: usize,
    pub iterations: usize,
    /// Negative log partial likelihood at `beta`.
    pub loss: f64,
}

impl CoxModel {
    pub fn std_errors(&self) -> Vec<f64> {
        let p = self.beta.len();
        (0..p).map(|j| self.covariance[j * p + j].max(0.0).sqrt()).collect()
    }
}

pub const MAX_NEWTON_ITERATIONS: usize = 50;
pub const SCORE_TOLERANCE: f64 = 1e-8;

struct Derivatives {
    loss: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn derivatives(x: &[f64], p: usize, beta: &DVector<f64>, times: &[f64], events: &[bool], strata: &[usize]) -> Derivatives {
    let n = times.len();
    let eta: Vec<f64> = (0..n)
        .map(|i| (0..p).map(|j| x[i * p + j] * beta[j]).sum())
        .collect();
    let mut loss = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for idx in strata_indices(strata) {
        let shift = idx.iter().map(|&i| eta[i]).fold(f64::NEG_INFINITY, f64::max);
        let rg = RiskGroups::new(&idx, times, events);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(p);
        let mut s2 = DMatrix::zeros(p, p);
        for (_, members, evs) in &rg.groups {
            for &i in members {
                let w = (eta[i] - shift).exp();
                s0 += w;
                let xi = DVector::from_row_slice(&x[i * p..(i + 1) * p]);
                s1.axpy(w, &xi, 1.0);
                s2.ger(w, &xi, &xi, 1.0);
            }
            if evs.is_empty() {
                continue;
            }
            let d = evs.len() as f64;
            loss += d * (s0.ln() + shift);
            let mean = &s1 / s0;
            for &i in evs {
                loss -= eta[i];
                for j in 0..p {
                    score[j] -= x[i * p + j];
                }
            }
            score.axpy(d, &mean, 1.0);
            info += (&s2 / s0 - &mean * mean.transpose()) * d;
        }
    }
    Derivatives { loss, score, info }
}

/// Fits an unstratified Cox model. `x` is row-major `n x p`.
pub fn fit_cox(x: &[f64], p: usize, times: &[f64], events: &[bool]) -> Result<CoxModel, CoxError> {
    fit_cox_stratified(x, p, times, events, &vec![0; times.len()])
}

/// Newton-Raphson on the Breslow negative log partial likelihood with
/// step-halving, stopping at `max |score| < 1e-8`.
pub fn fit_cox_stratified(
    x: &[f64],
    p: usize,
    times: &[f64],
    events: &[bool],
    strata: &[usize],
) -> Result<CoxModel, CoxError> {
    let n = times.len();
    if x.len() != n * p || events.len() != n || strata.len() != n {
        return Err(CoxError::LengthMismatch(format!(
            "x has {} entries for {n} rows x {p} covariates",
            x.len()
        )));
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(CoxError::NoEvents);
    }
    if n_events < p + 1 {
        return Err(CoxError::InsufficientEvents {
            events: n_events,
            covariates: p,
            needed: p + 1,
        });
    }
    for j in 0..p {
        let first = x[j];
        if (0..n).all(|i| x[i * p + j] == first) {
            return Err(CoxError::ConstantColumn(j));
        }
    }

    let mut beta = DVector::zeros(p);
    let mut cur = derivatives(x, p, &beta, times, events, strata);
    for it in 0..=MAX_NEWTON_ITERATIONS {
        let max_score = cur.score.amax();
        if max_score < SCORE_TOLERANCE {
            if diverged(x, p, &beta) {
                return Err(CoxError::ConvergenceFailure {
                    iterations: it,
                    max_score,
                    beta: beta.iter().copied().collect(),
                });
            }
            let chol = cur.info.clone().cholesky().ok_or(CoxError::SingularFit)?;
            let cov = chol.inverse();
            return Ok(CoxModel {
                beta: beta.iter().copied().collect(),
                covariance: (0..p).flat_map(|r| (0..p).map(move |c| (r, c))).map(|(r, c)| cov[(r, c)]).collect(),
                n_events,
                iterations: it,
                loss: cur.loss,
            });
        }
        if it == MAX_NEWTON_ITERATIONS {
            return Err(CoxError::ConvergenceFailure {
                iterations: it,
                max_score,
                beta: beta.iter().copied().collect(),
            });
        }
        let chol = cur.info.clone().cholesky().ok_or(CoxError::SingularFit)?;
        let step = chol.solve(&cur.score);
        let mut scale = 1.0;
        loop {
            let candidate = &beta - &step * scale;
            let next = derivatives(x, p, &candidate, times, events, strata);
            if next.loss.is_finite() && next.loss <= cur.loss + 1e-12 * cur.loss.abs().max(1.0) {
                beta = candidate;
                cur = next;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                return Err(CoxError::ConvergenceFailure {
                    iterations: it,
                    max_score,
                    beta: beta.iter().copied().collect(),
                });
            }
        }
    }
    unreachable!("loop returns on the last iteration")
}

/// Coefficient magnitude, per standard deviation of its covariate, beyond
/// which the likelihood is treated as monotone (separated data).
pub const DIVERGENCE_BOUND: f64 = 15.0;

fn diverged(x: &[f64], p: usize, beta: &DVector<f64>) -> bool {
    let n = x.len() / p;
    (0..p).any(|j| {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * p + j] - mean).powi(2)).sum::<f64>() / n as f64;
        (beta[j] * var.sqrt()).abs() > DIVERGENCE_BOUND
    })
}

/// One covariate of a hazard table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRow {
    pub variable: String,
    pub beta: f64,
    pub std_error: f64,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Wald chi-square (1 dof) p-value.
    pub p_value: f64,
}

impl HazardRow {
    /// `HR (low-high)` with two decimals, e.g. `0.90 (0.88-0.92)`.
    pub fn formatted(&self) -> String {
        format!("{:.2} ({:.2}-{:.2})", self.hazard_ratio, self.ci_low, self.ci_high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardReport {
    pub rows: Vec<HazardRow>,
}

pub const Z_95: f64 = 1.959963984540054;

/// Hazard ratio, 95% confidence interval and Wald p-value for one coefficient.
pub fn hazard_row(variable: &str, beta: f64, std_error: f64) -> HazardRow {
    let z2 = if std_error > 0.0 {
        (beta / std_error).powi(2)
    } else if beta == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let p_value = if z2.is_infinite() {
        0.0
    } else {
        ChiSquared::new(1.0).expect("valid dof").sf(z2).clamp(0.0, 1.0)
    };
    HazardRow {
        variable: variable.to_string(),
        beta,
        std_error,
        hazard_ratio: beta.exp(),
        ci_low: (beta - Z_95 * std_error).exp(),
        ci_high: (beta + Z_95 * std_error).exp(),
        p_value,
    }
}

pub fn hazard_report(model: &CoxModel, names: &[String]) -> HazardReport {
    let se = model.std_errors();
    HazardReport {
        rows: model
            .beta
            .iter()
            .zip(&se)
            .zip(names)
            .map(|((&b, &s), name)| hazard_row(name, b, s))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_subjects_equal_risk_gives_ln2() {
        let (loss, _) = cox_pl_loss(&[0.3, 0.3], &[1.0, 2.0], &[true, false], &[0, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_subject_loss_is_zero() {
        let (loss, grad) = cox_pl_loss(&[1.7], &[3.0], &[true], &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad[0].abs() < 1e-12);
    }

    #[test]
    fn no_events_is_an_error() {
        assert_eq!(cox_pl_loss(&[0.0, 1.0], &[1.0, 2.0], &[false, false], &[0, 0]), Err(CoxError::NoEvents));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10;
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Include a tie in time to exercise Breslow grouping.
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        times[3] = times[7];
        let events: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let strata: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let (_, grad) = cox_pl_loss(&eta, &times, &events, &strata).unwrap();
        let h = 1e-5;
        for k in 0..n {
            let mut up = eta.clone();
            let mut dn = eta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (cox_pl_loss(&up, &times, &events, &strata).unwrap().0
                - cox_pl_loss(&dn, &times, &events, &strata).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
            assert!(rel < 1e-6, "k={k} fd={fd} an={}", grad[k]);
        }
    }

    #[test]
    fn loss_invariant_to_constant_shift() {
        let eta = [0.1, -0.4, 2.0, 0.7, -1.2];
        let times = [1.0, 2.0, 2.0, 4.0, 0.5];
        let events = [true, true, false, true, true];
        let strata = [0, 0, 0, 0, 0];
        let (base, _) = cox_pl_loss(&eta, &times, &events, &strata).unwrap();
        for c in [-30.0, 1.5, 40.0] {
            let shifted: Vec<f64> = eta.iter().map(|v| v + c).collect();
            let (l, _) = cox_pl_loss(&shifted, &times, &events, &strata).unwrap();
            assert!((l - base).abs() < 1e-10, "shift {c}: {l} vs {base}");
        }
    }

    #[test]
    fn breslow_tie_hand_example() {
        // Times 1,1,2 all events, zero risk: groups {1,1}: risk set 3 => 2 ln 3; {2}: ln 1.
        let (loss, _) = cox_pl_loss(&[0.0; 3], &[1.0, 1.0, 2.0], &[true, true, true], &[0; 3]).unwrap();
        assert!((loss - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hazard_row_reference_values() {
        let r = hazard_row("x", 0.0, 1.0);
        assert_eq!(r.hazard_ratio, 1.0);
        assert!((r.ci_low - 0.141).abs() < 1e-3);
        assert!((r.ci_high - 7.10).abs() < 1e-2);
        assert!((r.p_value - 1.0).abs() < 1e-12);

        let r = hazard_row("x", 3f64.ln(), 0.0);
        assert!((r.hazard_ratio - 3.0).abs() < 1e-12);
        assert_eq!(r.p_value, 0.0);
        let r = hazard_row("x", 3f64.ln(), 1e-3);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn hazard_ratios_monotone_in_beta() {
        let a = hazard_row("a", -0.2, 0.3);
        let b = hazard_row("b", 0.4, 0.3);
        assert!(a.hazard_ratio < b.hazard_ratio);
        assert!(a.ci_low < a.hazard_ratio && a.hazard_ratio < a.ci_high);
    }

    #[test]
    fn formatted_row_mirrors_table_layout() {
        let r = HazardRow {
            variable: "tissue_area".into(),
            beta: 0.9f64.ln(),
            std_error: 0.0,
            hazard_ratio: 0.90,
            ci_low: 0.88,
            ci_high: 0.92,
            p_value: 0.0,
        };
        assert_eq!(r.formatted(), "0.90 (0.88-0.92)");
    }

    fn simulate(rng: &mut ChaCha8Rng, n: usize, beta: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut x = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let rate = 0.1 * (beta * xi).exp();
            let ti = -rng.random::<f64>().ln() / rate;
            let ci = -rng.random::<f64>().ln() / 0.05;
            x.push(xi);
            t.push(ti.min(ci));
            e.push(ti <= ci);
        }
        (x, t, e)
    }

    #[test]
    fn null_covariate_fit_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, t, e) = simulate(&mut rng, 2000, 0.0);
        let m = fit_cox(&x, 1, &t, &e).unwrap();
        assert!(m.beta[0].abs() < 0.1, "beta {}", m.beta[0]);
        let row = &hazard_report(&m, &["x".into()]).rows[0];
        assert!(row.ci_low < 1.0 && row.ci_high > 1.0);
    }

    #[test]
    fn planted_hazard_ratio_is_covered() {
        let mut covered = 0;
        for rep in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let (x, t, e) = simulate(&mut rng, 500, 2f64.ln());
            let m = fit_cox(&x, 1, &t, &e).unwrap();
            let row = &hazard_report(&m, &["x".into()]).rows[0];
            if row.ci_low <= 2.0 && 2.0 <= row.ci_high {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}/100");
    }

    #[test]
    fn newton_converges_and_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 300;
        let p = 2;
        let mut x = Vec::new();
        let mut t = Vec::new();
        let mut e = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let rate = (0.8 * a - 0.5 * b).exp();
            x.extend([a, b]);
            t.push(-rng.random::<f64>().ln() / rate);
            e.push(rng.random_bool(0.8));
        }
        let m = fit_cox(&x, p, &t, &e).unwrap();
        let zero = derivatives(&x, p, &DVector::zeros(p), &t, &e, &vec![0; n]).loss;
        assert!(m.loss <= zero);
        assert!(m.iterations < MAX_NEWTON_ITERATIONS);
    }

    #[test]
    fn constant_column_and_few_events_rejected() {
        let x = [1.0, 1.0, 1.0];
        let t = [1.0, 2.0, 3.0];
        let e = [true, true, false];
        assert_eq!(fit_cox(&x, 1, &t, &e), Err(CoxError::ConstantColumn(0)));
        let x = [0.0, 1.0, 2.0];
        let e = [false, false, false];
        assert_eq!(fit_cox(&x, 1, &t, &e), Err(CoxError::NoEvents));
        let x = [0.0, 1.0, 2.0, 1.0, 0.0, 2.0];
        let e = [true, false, false];
        assert!(matches!(fit_cox(&x, 2, &t, &e), Err(CoxError::InsufficientEvents { .. })));
    }

    #[test]
    fn perfectly_separated_data_does_not_converge() {
        // Higher covariate always fails first: the MLE diverges.
        let x: Vec<f64> = (0..20).map(|i| f64::from(i)).collect();
        let t: Vec<f64> = (0..20).map(|i| 100.0 - f64::from(i)).collect();
        let e = vec![true; 20];
        assert!(matches!(
            fit_cox(&x, 1, &t, &e),
            Err(CoxError::ConvergenceFailure { .. }) | Err(CoxError::SingularFit)
        ));
    }

    #[test]
    fn baseline_and_martingale_residuals() {
        let eta = [0.0, 0.0, 0.0, 0.0];
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true, false, true, false];
        let h = BaselineHazard::fit(&eta, &t, &e);
        assert!((h.at(1.0) - 0.25).abs() < 1e-12);
        assert!((h.at(2.5) - 0.25).abs() < 1e-12);
        assert!((h.at(3.0) - 0.75).abs() < 1e-12);
        assert_eq!(h.at(0.5), 0.0);
        let r = martingale_residuals(&eta, &t, &e, &h);
        assert!((r[0] - 0.75).abs() < 1e-12);
        assert!((r[1] + 0.25).abs() < 1e-12);
        // Residuals sum to zero at the fitted baseline.
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn all_censored_martingale_residuals_nonpositive() {
        let eta = [0.3, -0.1, 0.8];
        let t = [1.0, 2.0, 3.0];
        let h = BaselineHazard::fit(&eta, &[0.5, 1.0, 1.5], &[true, true, false]);
        let r = martingale_residuals(&eta, &t, &[false; 3], &h);
        assert!(r.iter().all(|&v| v <= 0.0));
    }
}
