use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::StatsError;

/// Mean and covariance of a fitted multivariate Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self, StatsError> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(StatsError::DimensionMismatch(format!(
                "covariance has {} entries for dimension {d}",
                covariance.len()
            )));
        }
        Ok(GaussianMoments { mean, covariance })
    }

    pub fn univariate(mean: f64, variance: f64) -> Self {
        GaussianMoments {
            mean: vec![mean],
            covariance: vec![variance],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.covariance);
        (&m + m.transpose()) * 0.5
    }
}

/// Sample mean and unbiased covariance of `samples`, stored row-major with
/// `d` columns.
pub fn fit_gaussian(samples: &[f64], d: usize) -> Result<GaussianMoments, StatsError> {
    if d == 0 || samples.len() % d != 0 {
        return Err(StatsError::DimensionMismatch(format!("{} values for dimension {d}", samples.len())));
    }
    let m = samples.len() / d;
    if m < 2 {
        return Err(StatsError::DegenerateSample(format!("{m} samples, need at least 2")));
    }
    let mut mean = vec![0.0; d];
    for row in samples.chunks_exact(d) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = vec![0.0; d * d];
    for row in samples.chunks_exact(d) {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    Ok(GaussianMoments { mean, covariance: cov })
}

/// Univariate shortcut for [`fit_gaussian`] with `d = 1`.
pub fn fit_gaussian_1d(samples: &[f64]) -> Result<GaussianMoments, StatsError> {
    fit_gaussian(samples, 1)
}

/// Fréchet distance between two Gaussians (squared 2-Wasserstein).
///
/// One-dimensional inputs use `(m1 - m2)^2 + (s1 - s2)^2` directly; other
/// dimensions go through [`fid_general`].
pub fn fid(g1: &GaussianMoments, g2: &GaussianMoments) -> Result<f64, StatsError> {
    if g1.dim() != g2.dim() {
        return Err(StatsError::DimensionMismatch(format!("{} vs {}", g1.dim(), g2.dim())));
    }
    if g1 == g2 {
        return Ok(0.0);
    }
    if g1.dim() == 1 {
        let dm = g1.mean[0] - g2.mean[0];
        let ds = g1.covariance[0].max(0.0).sqrt() - g2.covariance[0].max(0.0).sqrt();
        return Ok(dm * dm + ds * ds);
    }
    fid_general(g1, g2)
}

/// Symmetric PSD square root by eigendecomposition, clamping negative
/// eigenvalues to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn trace_cross_root(a: &DMatrix<f64>, b_root: &DMatrix<f64>) -> f64 {
    let inner = b_root * a * b_root;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Matrix route for any dimension. The cross term is averaged over both
/// orderings so that the result is symmetric to rounding.
pub fn fid_general(g1: &GaussianMoments, g2: &GaussianMoments) -> Result<f64, StatsError> {
    if g1.dim() != g2.dim() {
        return Err(StatsError::DimensionMismatch(format!("{} vs {}", g1.dim(), g2.dim())));
    }
    if g1 == g2 {
        return Ok(0.0);
    }
    let s1 = g1.cov_matrix();
    let s2 = g2.cov_matrix();
    let cross = 0.5 * (trace_cross_root(&s1, &psd_sqrt(&s2)) + trace_cross_root(&s2, &psd_sqrt(&s1)));
    let dm = DVector::from_column_slice(&g1.mean) - DVector::from_column_slice(&g2.mean);
    Ok((dm.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}
