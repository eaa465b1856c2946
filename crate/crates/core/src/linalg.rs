//! Small dense linear-algebra helpers shared by the estimators and criteria.
//!
//! Everything here works on symmetric matrices through their eigendecomposition,
//! so square roots and inverse square roots are always the symmetric ones.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used for conditioning checks and pseudo-inverses.
pub const REL_EIG_CUTOFF: f64 = 1e-10;

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn require_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    require_square(m, what)?;
    if is_symmetric(m, 1e-12) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} is not symmetric")))
    }
}

/// Symmetrize and decompose. Eigenvalues are returned in ascending order.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// `U diag(f(λ)) Uᵀ`.
pub fn spectral_map(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let s = f(lam);
        scaled.column_mut(j).scale_mut(s);
    }
    &scaled * vecs.transpose()
}

/// True when every eigenvalue is at least `-rel_tol * λ_max`.
pub fn is_psd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let (vals, _) = sym_eigen(m);
    let max = vals[vals.len() - 1].abs().max(vals[0].abs());
    vals[0] >= -rel_tol * max
}

pub fn require_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    require_symmetric(m, what)?;
    if is_psd(m, REL_EIG_CUTOFF) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} is not positive semidefinite")))
    }
}

/// Symmetric square root of a PSD matrix; tiny negative eigenvalues are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    spectral_map(&vals, &vecs, |l| l.max(0.0).sqrt())
}

/// Symmetric inverse square root of an SPD matrix. Fails when the smallest
/// eigenvalue is below `REL_EIG_CUTOFF` times the largest.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let n = vals.len();
    if n == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    let max = vals[n - 1];
    let min = vals[0];
    if max <= 0.0 || min <= REL_EIG_CUTOFF * max {
        return Err(Error::Conditioning(format!(
            "eigenvalue range [{min:.3e}, {max:.3e}]"
        )));
    }
    Ok(spectral_map(&vals, &vecs, |l| 1.0 / l.sqrt()))
}

/// Pseudo inverse square root: eigenvalues below `REL_EIG_CUTOFF * λ_max` map to zero.
pub fn psd_pinv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let n = vals.len();
    if n == 0 || vals[n - 1] <= 0.0 {
        return Err(Error::invalid("matrix has no positive eigenvalues"));
    }
    let cutoff = REL_EIG_CUTOFF * vals[n - 1];
    Ok(spectral_map(&vals, &vecs, |l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 }))
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// `tr(A A)` for symmetric `A`, i.e. the squared Frobenius norm.
pub fn trace_of_square(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

pub fn centering(k: usize) -> DMatrix<f64> {
    DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serde adapter for `DMatrix<f64>` as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::to_rows(m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `DVector<f64>` as a flat list.
pub mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
