//! Exhaustive-subset invariant causal prediction.
//!
//! For each subset `S` of predictors, `Y` is regressed on `X_S` (OLS with
//! intercept, all environments pooled) and the residuals of every
//! environment are compared with those of the remaining environments. The
//! estimate is the intersection of all subsets whose residuals look
//! invariant.

pub mod oracle;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EnvDataset, Outcome};
use crate::stats::{two_sample_test, IndexSet, StatsError, TwoSampleTest};

/// Largest number of predictors searched exhaustively.
pub const MAX_EXHAUSTIVE_VARS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpVariant {
    /// Welch t on means plus F on variances.
    Classic,
    /// Wilcoxon rank-sum plus Brown–Forsythe Levene ("NICP-tests").
    NonlinearTests,
}

impl IcpVariant {
    pub fn tests(self) -> [TwoSampleTest; 2] {
        match self {
            IcpVariant::Classic => [TwoSampleTest::WelchT, TwoSampleTest::FVar],
            IcpVariant::NonlinearTests => [TwoSampleTest::Wilcoxon, TwoSampleTest::Levene],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IcpVariant::Classic => "icp",
            IcpVariant::NonlinearTests => "nicp_tests",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("{0} predictors exceed the exhaustive-search limit of {MAX_EXHAUSTIVE_VARS}")]
    ExhaustionGuard(usize),
    #[error("invariant prediction needs a regression outcome")]
    NotRegression,
    #[error("need at least 2 environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("environment `{0}` has fewer than 2 rows")]
    DegenerateEnvironment(String),
    #[error("alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Outcome of testing one subset. `p_values[u]` is the Bonferroni-adjusted
/// p-value of environment `u` against the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetDecision {
    pub subset: IndexSet,
    pub p_values: Vec<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub estimate: IndexSet,
    pub decisions: Vec<SubsetDecision>,
}

/// Subset encoded by bit mask `bits`.
pub fn subset_of(bits: usize, n: usize) -> IndexSet {
    (0..n).filter(|i| bits >> i & 1 == 1).collect()
}

struct Design {
    n: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    env: Vec<usize>,
    n_envs: usize,
}

fn design(data: &EnvDataset) -> Result<Design, BaselineError> {
    if data.environments.len() < 2 {
        return Err(BaselineError::TooFewEnvironments(data.environments.len()));
    }
    let n = data.n_vars();
    if n > MAX_EXHAUSTIVE_VARS {
        return Err(BaselineError::ExhaustionGuard(n));
    }
    for e in &data.environments {
        if !matches!(e.outcome, Outcome::Regression(_)) {
            return Err(BaselineError::NotRegression);
        }
        if e.rows() < 2 {
            return Err(BaselineError::DegenerateEnvironment(e.tag.clone()));
        }
    }
    let p = data.pooled();
    Ok(Design {
        n,
        x: p.x,
        y: p.y,
        env: p.env,
        n_envs: data.environments.len(),
    })
}

/// OLS residuals of `y` on an intercept and the columns in `cols`.
fn ols_residuals(d: &Design, cols: &[usize]) -> Vec<f64> {
    let rows = d.y.len();
    let k = cols.len() + 1;
    let a = DMatrix::from_fn(rows, k, |r, c| if c == 0 { 1.0 } else { d.x[r * d.n + cols[c - 1]] });
    let b = DVector::from_column_slice(&d.y);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    let beta = match ata.clone().cholesky() {
        Some(ch) => ch.solve(&atb),
        None => ata
            .svd(true, true)
            .solve(&atb, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(k)),
    };
    (b - a * beta).iter().copied().collect()
}

fn evaluate(d: &Design, bits: usize, alpha: f64, variant: IcpVariant) -> Result<SubsetDecision, BaselineError> {
    let subset = subset_of(bits, d.n);
    let cols: Vec<usize> = subset.iter().copied().collect();
    let resid = ols_residuals(d, &cols);
    let mut p_values = Vec::with_capacity(d.n_envs);
    for u in 0..d.n_envs {
        let (inside, outside): (Vec<_>, Vec<_>) = resid.iter().zip(&d.env).partition(|(_, &e)| e == u);
        let a: Vec<f64> = inside.into_iter().map(|(r, _)| *r).collect();
        let b: Vec<f64> = outside.into_iter().map(|(r, _)| *r).collect();
        let mut p = 1.0f64;
        for t in variant.tests() {
            let raw = two_sample_test(&a, &b, t)?.p_value;
            p = p.min((2.0 * raw).min(1.0));
        }
        p_values.push(p);
    }
    let accepted = p_values.iter().all(|&p| p > alpha);
    Ok(SubsetDecision {
        subset,
        p_values,
        accepted,
    })
}

/// Intersection of the accepted subsets, empty when none is accepted.
pub fn intersect_accepted(decisions: &[SubsetDecision]) -> IndexSet {
    let mut acc: Option<IndexSet> = None;
    for d in decisions.iter().filter(|d| d.accepted) {
        acc = Some(match acc {
            None => d.subset.clone(),
            Some(s) => s.intersection(&d.subset).copied().collect(),
        });
    }
    acc.unwrap_or_default()
}

/// Runs ICP over all `2^n` subsets. Decisions are listed by subset bit mask.
pub fn icp(data: &EnvDataset, alpha: f64, variant: IcpVariant) -> Result<IcpResult, BaselineError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BaselineError::Alpha(alpha));
    }
    let d = design(data)?;
    let decisions = (0..1usize << d.n)
        .into_par_iter()
        .map(|bits| evaluate(&d, bits, alpha, variant))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IcpResult {
        estimate: intersect_accepted(&decisions),
        decisions,
    })
}
