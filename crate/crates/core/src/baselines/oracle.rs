//! Brute-force reference for [`icp`](super::icp), written without the
//! regression or test code used there. Meant for cross-checking only.

use std::collections::HashMap;

use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};
use thiserror::Error;

use super::{IcpVariant, SubsetDecision};
use crate::data::{EnvDataset, Outcome};

pub const ORACLE_MAX_VARS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle needs at least 2 environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("oracle handles at most {ORACLE_MAX_VARS} variables, got {0}")]
    TooManyVars(usize),
    #[error("oracle needs a regression outcome")]
    NotRegression,
}

/// Solves `m z = v` by Gaussian elimination with partial pivoting.
fn gauss_solve(mut m: Vec<Vec<f64>>, mut v: Vec<f64>) -> Vec<f64> {
    let k = v.len();
    for c in 0..k {
        let piv = (c..k).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, piv);
        v.swap(c, piv);
        if m[c][c].abs() < 1e-300 {
            continue;
        }
        for r in c + 1..k {
            let f = m[r][c] / m[c][c];
            for j in c..k {
                m[r][j] -= f * m[c][j];
            }
            v[r] -= f * v[c];
        }
    }
    let mut z = vec![0.0; k];
    for c in (0..k).rev() {
        let s: f64 = (c + 1..k).map(|j| m[c][j] * z[j]).sum();
        z[c] = if m[c][c].abs() < 1e-300 { 0.0 } else { (v[c] - s) / m[c][c] };
    }
    z
}

fn var1(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn t_test(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (var1(a) / a.len() as f64, var1(b) / b.len() as f64);
    let diff = mean(a) - mean(b);
    if sa + sb == 0.0 {
        return if diff == 0.0 { 1.0 } else { 0.0 };
    }
    let t = diff / (sa + sb).sqrt();
    let nu = (sa + sb).powi(2) / (sa.powi(2) / (a.len() - 1) as f64 + sb.powi(2) / (b.len() - 1) as f64);
    let cdf = StudentsT::new(0.0, 1.0, nu).unwrap().cdf(-t.abs());
    (2.0 * cdf).min(1.0)
}

fn f_test(a: &[f64], b: &[f64]) -> f64 {
    let (va, vb) = (var1(a), var1(b));
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    let dist = FisherSnedecor::new((a.len() - 1) as f64, (b.len() - 1) as f64).unwrap();
    let lower = dist.cdf(va / vb);
    (2.0 * lower.min(1.0 - lower)).clamp(0.0, 1.0)
}

fn median_of(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let h = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[h - 1] + s[h]) / 2.0
    } else {
        s[h]
    }
}

fn brown_forsythe(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (median_of(a), median_of(b));
    let za: Vec<f64> = a.iter().map(|v| (v - ma).abs()).collect();
    let zb: Vec<f64> = b.iter().map(|v| (v - mb).abs()).collect();
    let all: Vec<f64> = za.iter().chain(&zb).copied().collect();
    let zbar = mean(&all);
    let ssb = za.len() as f64 * (mean(&za) - zbar).powi(2) + zb.len() as f64 * (mean(&zb) - zbar).powi(2);
    let ssw = var1(&za) * (za.len() - 1) as f64 + var1(&zb) * (zb.len() - 1) as f64;
    let dfw = (all.len() - 2) as f64;
    if ssw == 0.0 {
        return if ssb == 0.0 { 1.0 } else { 0.0 };
    }
    let dist = FisherSnedecor::new(1.0, dfw).unwrap();
    (1.0 - dist.cdf(ssb / (ssw / dfw))).clamp(0.0, 1.0)
}

/// Coefficients of the Gaussian binomial `[m+n choose m]_q`: entry `u`
/// counts rank arrangements with Mann–Whitney count `u`.
fn q_binomial(m: usize, n: usize) -> Vec<f64> {
    let mut poly = vec![0.0; m * n + 1];
    poly[0] = 1.0;
    for i in 1..=m {
        // multiply by 1 - q^(n+i)
        for u in (n + i..poly.len()).rev() {
            poly[u] -= poly[u - n - i];
        }
        // divide by 1 - q^i
        for u in i..poly.len() {
            poly[u] += poly[u - i];
        }
    }
    poly
}

fn rank_sum(a: &[f64], b: &[f64]) -> f64 {
    let mut tagged: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    tagged.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    let mut sum = 0.0;
    let mut start = 0;
    while start < tagged.len() {
        let end = tagged[start..].iter().take_while(|t| t.0 == tagged[start].0).count() + start;
        let avg = (start + 1 + end) as f64 / 2.0;
        sum += avg * tagged[start..end].iter().filter(|t| t.1).count() as f64;
        start = end;
    }
    sum
}

fn rank_sum_test(a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let u = rank_sum(a, b) - (m * (m + 1)) as f64 / 2.0;
    let half = (m * n) as f64 / 2.0;
    let far = if u > half { u } else { (m * n) as f64 - u };
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in a.iter().chain(b) {
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    let tied = counts.values().any(|&c| c > 1);
    if m.min(n) < 10 && !tied {
        let coeffs = q_binomial(m.min(n), m.max(n));
        let total: f64 = coeffs.iter().sum();
        let tail: f64 = coeffs[far.round() as usize..].iter().sum();
        return (2.0 * tail / total).min(1.0);
    }
    let nn = (m + n) as f64;
    let ties: f64 = counts.values().map(|&c| (c * c * c - c) as f64).sum();
    let sd = ((m * n) as f64 / 12.0 * ((nn + 1.0) - ties / (nn * (nn - 1.0)))).sqrt();
    if sd <= 0.0 {
        return 1.0;
    }
    let z = (far - half - 0.5) / sd;
    (2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z))).clamp(0.0, 1.0)
}

/// Decisions for every subset, listed by bit mask like `icp`.
pub fn brute_subset_oracle(data: &EnvDataset, alpha: f64, variant: IcpVariant) -> Result<Vec<SubsetDecision>, OracleError> {
    let envs = &data.environments;
    if envs.len() < 2 {
        return Err(OracleError::TooFewEnvironments(envs.len()));
    }
    let p = data.n_vars();
    if p > ORACLE_MAX_VARS {
        return Err(OracleError::TooManyVars(p));
    }
    let mut rows: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for (u, e) in envs.iter().enumerate() {
        let Outcome::Regression(y) = &e.outcome else {
            return Err(OracleError::NotRegression);
        };
        for (r, &yr) in y.iter().enumerate() {
            rows.push((u, e.x[r * p..(r + 1) * p].to_vec(), yr));
        }
    }
    let mut out = Vec::new();
    for bits in 0..1usize << p {
        let chosen: Vec<usize> = (0..p).filter(|j| bits & (1 << j) != 0).collect();
        let feat = |x: &[f64]| -> Vec<f64> { std::iter::once(1.0).chain(chosen.iter().map(|&j| x[j])).collect() };
        let k = chosen.len() + 1;
        let mut xtx = vec![vec![0.0; k]; k];
        let mut xty = vec![0.0; k];
        for (_, x, y) in &rows {
            let f = feat(x);
            for i in 0..k {
                xty[i] += f[i] * y;
                for j in 0..k {
                    xtx[i][j] += f[i] * f[j];
                }
            }
        }
        let coef = gauss_solve(xtx, xty);
        let resid: Vec<(usize, f64)> = rows
            .iter()
            .map(|(u, x, y)| (*u, y - feat(x).iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        let mut p_values = Vec::new();
        for u in 0..envs.len() {
            let a: Vec<f64> = resid.iter().filter(|r| r.0 == u).map(|r| r.1).collect();
            let b: Vec<f64> = resid.iter().filter(|r| r.0 != u).map(|r| r.1).collect();
            let (p1, p2) = match variant {
                IcpVariant::Classic => (t_test(&a, &b), f_test(&a, &b)),
                IcpVariant::NonlinearTests => (rank_sum_test(&a, &b), brown_forsythe(&a, &b)),
            };
            p_values.push((2.0 * p1.min(p2)).min(1.0));
        }
        out.push(SubsetDecision {
            subset: chosen.into_iter().collect(),
            accepted: p_values.iter().all(|&q| q > alpha),
            p_values,
        });
    }
    Ok(out)
}
