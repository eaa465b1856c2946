//! Mean and covariance of distance estimates, the zero-distance covariance
//! `V = Ξ ∘ Ξ`, its whitening transform, and the linear map from second-moment
//! matrices to distances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{condition_pairs, ContrastMatrix};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    FullBiased,
    FullUnbiased,
    NullModel,
}

/// `D × D` covariance (or covariance structure) of a distance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceCovariance {
    pub v: DMatrix<f64>,
    pub kind: CovarianceKind,
    pub k: usize,
}

impl DistanceCovariance {
    pub fn new(v: DMatrix<f64>, kind: CovarianceKind, k: usize) -> Result<Self> {
        linalg::require_symmetric(&v, "distance covariance")?;
        if v.nrows() != crate::dataset::pair_count(k) {
            return Err(Error::invalid(format!(
                "{}x{} covariance does not match {k} conditions",
                v.nrows(),
                v.ncols()
            )));
        }
        Ok(Self { v, kind, k })
    }

    /// Identity structure, i.e. no whitening.
    pub fn identity(k: usize) -> Self {
        let d = crate::dataset::pair_count(k);
        Self {
            v: DMatrix::identity(d, d),
            kind: CovarianceKind::NullModel,
            k,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            v: &self.v * factor,
            ..self.clone()
        }
    }

    pub fn d(&self) -> usize {
        self.v.nrows()
    }

    /// Correlation matrix implied by `v`.
    pub fn correlation(&self) -> DMatrix<f64> {
        let sd: Vec<f64> = self.v.diagonal().iter().map(|x| x.sqrt()).collect();
        DMatrix::from_fn(self.d(), self.d(), |i, j| self.v[(i, j)] / (sd[i] * sd[j]))
    }
}

fn check_sigma_k(sigma_k: &DMatrix<f64>, c: &ContrastMatrix) -> Result<()> {
    linalg::require_symmetric(sigma_k, "sigma_k")?;
    if sigma_k.nrows() != c.k() {
        return Err(Error::invalid(format!(
            "sigma_k is {}x{}, contrast matrix has {} conditions",
            sigma_k.nrows(),
            sigma_k.ncols(),
            c.k()
        )));
    }
    Ok(())
}

/// Covariance of estimated pattern differences, `Ξ = C Σ_K Cᵀ`.
pub fn xi_matrix(sigma_k: &DMatrix<f64>, c: &ContrastMatrix) -> Result<DMatrix<f64>> {
    check_sigma_k(sigma_k, c)?;
    Ok(c.matrix() * sigma_k * c.matrix().transpose())
}

/// Covariance structure of distance estimates when all true distances are zero,
/// `V = Ξ ∘ Ξ`. The scalar in front of it is dropped.
pub fn null_covariance(sigma_k: &DMatrix<f64>, c: &ContrastMatrix) -> Result<DistanceCovariance> {
    let xi = xi_matrix(sigma_k, c)?;
    Ok(DistanceCovariance {
        v: xi.component_mul(&xi),
        kind: CovarianceKind::NullModel,
        k: c.k(),
    })
}

/// Mean and covariance of `diag(X Xᵀ)` for `X ~ MN(mean, row_cov, col_cov)`:
/// `E = diag(M Mᵀ + tr(Σ) V)`, `Var = 4 M Σ Mᵀ ∘ V + 2 tr(ΣΣ) (V ∘ V)`.
pub fn matnorm_quad_moments(
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (r, p) = mean.shape();
    if row_cov.shape() != (r, r) || col_cov.shape() != (p, p) {
        return Err(Error::invalid(format!(
            "mean is {r}x{p} but covariances are {}x{} and {}x{}",
            row_cov.nrows(),
            row_cov.ncols(),
            col_cov.nrows(),
            col_cov.ncols()
        )));
    }
    linalg::require_symmetric(row_cov, "row covariance")?;
    linalg::require_symmetric(col_cov, "column covariance")?;
    let tr = linalg::trace(col_cov);
    let tss = linalg::trace_of_square(col_cov);
    let mmt = mean * mean.transpose();
    let expectation = DVector::from_iterator(r, (0..r).map(|i| mmt[(i, i)] + tr * row_cov[(i, i)]));
    let signal = mean * col_cov * mean.transpose();
    let var = signal.component_mul(row_cov) * 4.0 + row_cov.component_mul(row_cov) * (2.0 * tss);
    Ok((expectation, var))
}

/// Full covariance of biased or crossvalidated distance estimates given the true
/// pattern differences `delta = C B` (`D × P`), channel covariance `Σ_P`,
/// `Ξ = C Σ_K Cᵀ`, and partition count `m`:
///
/// `(1/P²) (2 tr(Σ_P Σ_P) / n_pairs · Ξ∘Ξ + 4/M · (δ Σ_P δᵀ) ∘ Ξ)`
///
/// with `n_pairs = M²` (biased) or `M(M−1)` (crossvalidated).
pub fn full_covariance(
    estimator: Estimator,
    delta: &DMatrix<f64>,
    sigma_p: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    m: usize,
) -> Result<DistanceCovariance> {
    let (d, p) = delta.shape();
    if sigma_p.shape() != (p, p) || xi.shape() != (d, d) {
        return Err(Error::invalid("delta, sigma_p and xi shapes are inconsistent"));
    }
    let signal = delta * sigma_p * delta.transpose();
    covariance_from_signal(estimator, &signal, linalg::trace_of_square(sigma_p), p, xi, m)
}

/// Same as [`full_covariance`] with `δ Σ_P δᵀ` and `tr(Σ_P Σ_P)` supplied directly.
pub fn covariance_from_signal(
    estimator: Estimator,
    signal: &DMatrix<f64>,
    trace_sigma_p_sq: f64,
    p: usize,
    xi: &DMatrix<f64>,
    m: usize,
) -> Result<DistanceCovariance> {
    let d = xi.nrows();
    if signal.shape() != (d, d) || !xi.is_square() {
        return Err(Error::invalid("signal and xi shapes are inconsistent"));
    }
    let k = crate::dataset::conditions_for_pairs(d)
        .ok_or_else(|| Error::invalid(format!("{d} rows is not a pair count")))?;
    let (pairs, kind) = match estimator {
        Estimator::Biased if m >= 1 => ((m * m) as f64, CovarianceKind::FullBiased),
        Estimator::Unbiased if m >= 2 => ((m * (m - 1)) as f64, CovarianceKind::FullUnbiased),
        _ => {
            return Err(Error::invalid(format!(
                "{estimator} estimator covariance needs more partitions than {m}"
            )))
        }
    };
    let noise_term = xi.component_mul(xi) * (2.0 * trace_sigma_p_sq / pairs);
    let signal_term = signal.component_mul(xi) * (4.0 / m as f64);
    let v = (noise_term + signal_term) / (p * p) as f64;
    Ok(DistanceCovariance { v, kind, k })
}

/// Symmetric (pseudo) inverse square root `W` of `V`, with eigenvalues below
/// `1e-10 · λ_max` mapped to zero so that `W V W` projects onto the range of `V`.
pub fn whitener(v: &DistanceCovariance) -> Result<DMatrix<f64>> {
    if v.v.amax() == 0.0 {
        return Err(Error::invalid("cannot whiten with a zero covariance"));
    }
    linalg::psd_pinv_sqrt(&v.v)
}

/// `D × K²` matrix mapping column-major `vec(G)` to the distance vector,
/// `d_ij = G_ii + G_jj − G_ij − G_ji`.
pub fn build_t_d(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 conditions, got {k}")));
    }
    let pairs = condition_pairs(k);
    let idx = |i: usize, j: usize| i + j * k;
    let mut t = DMatrix::zeros(pairs.len(), k * k);
    for (row, &(i, j)) in pairs.iter().enumerate() {
        t[(row, idx(i, i))] += 1.0;
        t[(row, idx(j, j))] += 1.0;
        t[(row, idx(i, j))] -= 1.0;
        t[(row, idx(j, i))] -= 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_contrast_matrix;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let a = gaussian(n, n, seed);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.2
    }

    #[test]
    fn xi_for_identity_k3() {
        let c = build_contrast_matrix(3).unwrap();
        let xi = xi_matrix(&DMatrix::identity(3, 3), &c).unwrap();
        // pairs (0,1), (0,2), (1,2)
        assert_eq!(xi[(0, 0)], 2.0);
        assert_eq!(xi[(1, 1)], 2.0);
        assert_eq!(xi[(0, 1)], 1.0);
        assert_eq!(xi[(0, 2)], -1.0);
        assert_eq!(xi_matrix(&DMatrix::zeros(3, 3), &c).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn xi_matches_brute_force_covariance() {
        let k = 4;
        let s = random_spd(k, 7);
        let c = build_contrast_matrix(k).unwrap();
        let xi = xi_matrix(&s, &c).unwrap();
        let pairs = c.pairs();
        for (a, &(i, j)) in pairs.iter().enumerate() {
            for (b, &(u, v)) in pairs.iter().enumerate() {
                // cov(x_i - x_j, x_u - x_v)
                let expected = s[(i, u)] - s[(i, v)] - s[(j, u)] + s[(j, v)];
                assert!((xi[(a, b)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xi_rejects_wrong_shape() {
        let c = build_contrast_matrix(3).unwrap();
        assert!(xi_matrix(&DMatrix::identity(4, 4), &c).is_err());
    }

    #[test]
    fn null_covariance_k5_structure() {
        let c = build_contrast_matrix(5).unwrap();
        let v = null_covariance(&DMatrix::identity(5, 5), &c).unwrap();
        let corr = v.correlation();
        for (a, &(i, j)) in c.pairs().iter().enumerate() {
            for (b, &(u, w)) in c.pairs().iter().enumerate() {
                let shared = [i == u, i == w, j == u, j == w].iter().filter(|&&x| x).count();
                let expected = match (a == b, shared) {
                    (true, _) => 1.0,
                    (false, 1) => 0.25,
                    (false, 0) => 0.0,
                    _ => unreachable!(),
                };
                assert_eq!(corr[(a, b)], expected);
            }
        }
        // ratios 5 : 2.5 : 1 with multiplicities 1, 4, 5
        let (vals, _) = linalg::sym_eigen(&v.v);
        let expected = [1.0, 1.0, 1.0, 1.0, 1.0, 2.5, 2.5, 2.5, 2.5, 5.0];
        for (got, want) in vals.iter().zip(expected) {
            assert!((got / vals[0] - want).abs() < 1e-10);
        }
        assert!((vals[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn eigen_multiplicities_for_many_k() {
        for k in 4..=12 {
            let c = build_contrast_matrix(k).unwrap();
            let v = null_covariance(&DMatrix::identity(k, k), &c).unwrap();
            let (vals, _) = linalg::sym_eigen(&v.v);
            let kf = k as f64;
            let count = |target: f64| vals.iter().filter(|&&x| (x - target).abs() < 1e-8 * target).count();
            assert_eq!(count(2.0 * kf), 1);
            assert_eq!(count(kf), k - 1);
            assert_eq!(count(2.0), k * (k - 3) / 2);
            let ratio = vals[vals.len() - 1] / vals[0];
            assert!((ratio - kf).abs() < 1e-9);
        }
    }

    #[test]
    fn quad_moments_chi_square() {
        let p = 6;
        let (e, var) = matnorm_quad_moments(&DMatrix::zeros(3, p), &DMatrix::identity(3, 3), &DMatrix::identity(p, p)).unwrap();
        assert!(e.iter().all(|&x| x == p as f64));
        assert_eq!(var, DMatrix::identity(3, 3) * (2.0 * p as f64));
    }

    #[test]
    fn quad_moments_deterministic() {
        let mean = gaussian(3, 4, 1);
        let (e, var) = matnorm_quad_moments(&mean, &DMatrix::zeros(3, 3), &random_spd(4, 2)).unwrap();
        let mmt = &mean * mean.transpose();
        for i in 0..3 {
            assert!((e[i] - mmt[(i, i)]).abs() < 1e-12);
        }
        assert_eq!(var, DMatrix::zeros(3, 3));
    }

    #[test]
    fn quad_moments_identity_column_cov_form() {
        let mean = gaussian(3, 5, 4);
        let row = random_spd(3, 5);
        let (_, var) = matnorm_quad_moments(&mean, &row, &DMatrix::identity(5, 5)).unwrap();
        let expected = (&mean * mean.transpose()).component_mul(&row) * 4.0 + row.component_mul(&row) * 10.0;
        assert!((var - expected).amax() < 1e-12);
    }

    #[test]
    fn quad_moments_shape_errors() {
        assert!(matnorm_quad_moments(&DMatrix::zeros(3, 4), &DMatrix::identity(2, 2), &DMatrix::identity(4, 4)).is_err());
    }

    #[test]
    fn zero_signal_variance_ratio() {
        let c = build_contrast_matrix(4).unwrap();
        let xi = xi_matrix(&DMatrix::identity(4, 4), &c).unwrap();
        let delta = DMatrix::zeros(6, 8);
        let sp = DMatrix::identity(8, 8);
        for m in [2usize, 3, 5, 10] {
            let b = full_covariance(Estimator::Biased, &delta, &sp, &xi, m).unwrap();
            let u = full_covariance(Estimator::Unbiased, &delta, &sp, &xi, m).unwrap();
            for i in 0..6 {
                let ratio = u.v[(i, i)] / b.v[(i, i)];
                assert!((ratio - m as f64 / (m - 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_signal_reduces_to_null_structure() {
        let (k, p, m) = (5, 7, 4);
        let c = build_contrast_matrix(k).unwrap();
        let xi = xi_matrix(&DMatrix::identity(k, k), &c).unwrap();
        let full = full_covariance(Estimator::Unbiased, &DMatrix::zeros(c.d(), p), &DMatrix::identity(p, p), &xi, m).unwrap();
        let null = null_covariance(&DMatrix::identity(k, k), &c).unwrap();
        let scale = 2.0 * p as f64 / (m * (m - 1)) as f64 / (p * p) as f64;
        assert!((full.v - null.v * scale).amax() < 1e-14);
    }

    #[test]
    fn full_covariance_needs_two_partitions_for_crossvalidation() {
        let c = build_contrast_matrix(3).unwrap();
        let xi = xi_matrix(&DMatrix::identity(3, 3), &c).unwrap();
        let res = full_covariance(Estimator::Unbiased, &DMatrix::zeros(3, 2), &DMatrix::identity(2, 2), &xi, 1);
        assert!(matches!(res, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn more_signal_never_lowers_variance() {
        let (k, p) = (4, 5);
        let c = build_contrast_matrix(k).unwrap();
        let xi = xi_matrix(&random_spd(k, 3), &c).unwrap();
        let delta = c.matrix() * gaussian(k, p, 5);
        let signal = &delta * random_spd(p, 4) * delta.transpose();
        let a = gaussian(c.d(), 2, 6);
        let increment = &a * a.transpose();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let base = covariance_from_signal(est, &signal, 7.0, p, &xi, 3).unwrap();
            let more = covariance_from_signal(est, &(&signal + &increment), 7.0, p, &xi, 3).unwrap();
            for i in 0..c.d() {
                assert!(more.v[(i, i)] >= base.v[(i, i)]);
            }
        }
    }

    #[test]
    fn whitener_cases() {
        let id = DistanceCovariance::identity(3);
        assert!((whitener(&id).unwrap() - DMatrix::identity(3, 3)).amax() < 1e-14);
        let four = id.scaled(4.0);
        assert!((whitener(&four).unwrap() - DMatrix::identity(3, 3) * 0.5).amax() < 1e-14);
        let c = build_contrast_matrix(5).unwrap();
        let v = null_covariance(&DMatrix::identity(5, 5), &c).unwrap();
        let w = whitener(&v).unwrap();
        assert!((&w * &v.v * &w - DMatrix::identity(10, 10)).amax() < 1e-9);
        assert!((&w - w.transpose()).amax() < 1e-12);
        assert!((&w * &v.v - &v.v * &w).amax() < 1e-9);
        assert!(whitener(&id.scaled(0.0)).is_err());
    }

    #[test]
    fn whitener_of_rank_deficient_v_is_projector() {
        let mut s = DMatrix::<f64>::identity(4, 4);
        // conditions 0 and 1 measured with perfectly shared noise
        s[(0, 1)] = 1.0;
        s[(1, 0)] = 1.0;
        let c = build_contrast_matrix(4).unwrap();
        let v = null_covariance(&s, &c).unwrap();
        let w = whitener(&v).unwrap();
        let proj = &w * &v.v * &w;
        assert!((&proj * &proj - &proj).amax() < 1e-9);
        assert!((&w * &v.v - &v.v * &w).amax() < 1e-9);
    }

    #[test]
    fn t_d_k2() {
        let t = build_t_d(2).unwrap();
        // vec(G) column-major: G11, G21, G12, G22
        assert_eq!(t.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn t_d_gram_equals_contrast_hadamard() {
        for k in 3..=8 {
            let t = build_t_d(k).unwrap();
            let c = build_contrast_matrix(k).unwrap();
            let cc = c.matrix() * c.matrix().transpose();
            assert_eq!(&t * t.transpose(), cc.component_mul(&cc));
        }
        assert!(build_t_d(1).is_err());
    }

    #[test]
    fn t_d_matches_pairwise_formula() {
        let g = gaussian(4, 4, 12);
        let t = build_t_d(4).unwrap();
        let vec_g = DVector::from_column_slice(g.as_slice());
        let d = t * vec_g;
        for (row, (i, j)) in condition_pairs(4).into_iter().enumerate() {
            let expected = g[(i, i)] + g[(j, j)] - g[(i, j)] - g[(j, i)];
            assert!((d[row] - expected).abs() < 1e-12);
        }
    }
}
