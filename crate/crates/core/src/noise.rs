//! Channel and condition noise covariances: estimation from residuals,
//! diagonal shrinkage, and spatial prewhitening.

use nalgebra::DMatrix;

use crate::dataset::ActivityDataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Shrinkage weight used when the caller does not pick one.
pub const DEFAULT_SHRINKAGE: f64 = 0.3;

/// Condition covariance `Σ_K` and trace-normalized channel covariance `Σ_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    sigma_k: DMatrix<f64>,
    sigma_p: DMatrix<f64>,
}

impl NoiseSpec {
    /// Validates both matrices and rescales `sigma_p` to trace `P`.
    pub fn new(sigma_k: DMatrix<f64>, sigma_p: DMatrix<f64>) -> Result<Self> {
        linalg::require_psd(&sigma_k, "sigma_k")?;
        linalg::require_psd(&sigma_p, "sigma_p")?;
        let sigma_p = normalize_sigma_p(&sigma_p)?;
        Ok(Self { sigma_k, sigma_p })
    }

    /// `Σ_K = I_K`, `Σ_P = I_P`.
    pub fn iid(k: usize, p: usize) -> Self {
        Self {
            sigma_k: DMatrix::identity(k, k),
            sigma_p: DMatrix::identity(p, p),
        }
    }

    pub fn sigma_k(&self) -> &DMatrix<f64> {
        &self.sigma_k
    }

    pub fn sigma_p(&self) -> &DMatrix<f64> {
        &self.sigma_p
    }
}

/// Pooled channel covariance from per-partition residuals,
/// `Σ_m R_mᵀ R_m / Σ_m (N_m − k_m)`.
pub fn estimate_sigma_p(dataset: &ActivityDataset, regressors: usize) -> Result<DMatrix<f64>> {
    let residuals = dataset.residuals().ok_or(Error::MissingResiduals)?;
    let p = dataset.p();
    let mut acc = DMatrix::zeros(p, p);
    let mut dof = 0usize;
    for (m, r) in residuals.iter().enumerate() {
        if r.nrows() <= regressors {
            return Err(Error::DegreesOfFreedom {
                partition: m,
                rows: r.nrows(),
                regressors,
            });
        }
        acc += r.transpose() * r;
        dof += r.nrows() - regressors;
    }
    let est = acc / dof as f64;
    Ok((&est + est.transpose()) * 0.5)
}

/// `h · diag(Σ̂) + (1 − h) · Σ̂`.
pub fn shrink_sigma_p(sigma_hat: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::invalid(format!("shrinkage weight must lie in [0, 1], got {h}")));
    }
    linalg::require_symmetric(sigma_hat, "sigma_hat")?;
    let mut out = sigma_hat * (1.0 - h);
    for i in 0..out.nrows() {
        out[(i, i)] = sigma_hat[(i, i)];
    }
    Ok(out)
}

/// Right-multiply every partition by `Σ̃^{-1/2}` (symmetric root). Euclidean
/// distances on the result are Mahalanobis distances on the input.
pub fn prewhiten(dataset: &ActivityDataset, sigma_tilde: &DMatrix<f64>) -> Result<ActivityDataset> {
    linalg::require_symmetric(sigma_tilde, "sigma_tilde")?;
    if sigma_tilde.nrows() != dataset.p() {
        return Err(Error::invalid(format!(
            "channel covariance is {}x{}, dataset has {} channels",
            sigma_tilde.nrows(),
            sigma_tilde.ncols(),
            dataset.p()
        )));
    }
    let w = linalg::spd_inv_sqrt(sigma_tilde)?;
    dataset.map_patterns(|b| b * &w)
}

/// Estimate `Σ_P` from the residuals, shrink it by `h`, and prewhiten the
/// patterns with the result. `regressors` defaults to `K` per partition.
pub fn prewhiten_from_residuals(dataset: &ActivityDataset, h: f64, regressors: Option<usize>) -> Result<ActivityDataset> {
    let sigma_hat = estimate_sigma_p(dataset, regressors.unwrap_or(dataset.k()))?;
    let sigma_tilde = shrink_sigma_p(&sigma_hat, h)?;
    prewhiten(dataset, &sigma_tilde)
}

/// `tr(Σ)² / tr(ΣΣ)`.
pub fn effective_channel_count(sigma_p: &DMatrix<f64>) -> Result<f64> {
    linalg::require_square(sigma_p, "sigma_p")?;
    let tss = linalg::trace_of_square(sigma_p);
    if tss == 0.0 {
        return Err(Error::invalid("channel covariance is zero"));
    }
    let tr = linalg::trace(sigma_p);
    Ok(tr * tr / tss)
}

/// Rescale so that `tr(Σ_P) = P`.
pub fn normalize_sigma_p(sigma_p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::require_square(sigma_p, "sigma_p")?;
    let tr = linalg::trace(sigma_p);
    if tr.is_nan() || tr <= 0.0 {
        return Err(Error::invalid(format!("trace must be positive, got {tr}")));
    }
    Ok(sigma_p * (sigma_p.nrows() as f64 / tr))
}
