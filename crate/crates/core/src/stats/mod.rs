//! Gaussian moments and Fréchet distance, two-sample tests, and
//! evaluation metrics for causal sets and survival predictions.

mod gaussian;
mod hypothesis;
mod metrics;
mod survival;

pub use gaussian::{fid, fid_general, fit_gaussian, fit_gaussian_1d, psd_sqrt, GaussianMoments};
pub use hypothesis::{f_var, levene, two_sample_test, welch_t, wilcoxon, TestResult, TwoSampleTest, WILCOXON_EXACT_BELOW};
pub use metrics::{c_index, fwer, jaccard, IndexSet};
pub use survival::{binomial_ll, brier_ipcw, kaplan_meier, median_time, KaplanMeier, PROB_CLAMP};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no comparable pairs")]
    NoComparablePairs,
}

/// Mean and standard deviation (population, divisor n). Empty input gives zeros.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
