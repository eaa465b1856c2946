//! Squared-distance and second-moment estimators.
//!
//! The biased estimator takes the inner product of the across-partition mean
//! pattern difference with itself, so every noise term is multiplied by itself
//! once and the estimate is inflated by `Ξ_kk / M`. The crossvalidated estimator
//! only multiplies differences from distinct partitions, so its expectation is
//! the true distance. It can go negative and is never clipped.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{condition_pairs, conditions_for_pairs, pair_count, pattern_differences, ActivityDataset, ContrastMatrix};
use crate::error::{Error, Result};
use crate::linalg;

/// Above this many partitions the crossvalidated sum switches from the pairwise
/// loop to the sum-of-products identity.
pub const DIRECT_SUM_MAX_PARTITIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Mahalanobis,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Biased => "biased",
            Estimator::Unbiased => "unbiased",
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Mahalanobis => "mahalanobis",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "mahalanobis" => Ok(Metric::Mahalanobis),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

/// Vector of squared distances (per channel) over the canonical condition pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RdmEstimate {
    pub d: DVector<f64>,
    pub estimator: Estimator,
    pub metric: Metric,
    pub k: usize,
    pub m: usize,
}

#[derive(Serialize, Deserialize)]
struct RdmFile {
    k: usize,
    m: usize,
    estimator: Estimator,
    metric: Metric,
    pairs: Vec<[usize; 2]>,
    d: Vec<f64>,
}

impl RdmEstimate {
    pub fn new(d: DVector<f64>, estimator: Estimator, metric: Metric, k: usize, m: usize) -> Result<Self> {
        if d.len() != pair_count(k) {
            return Err(Error::invalid(format!(
                "{} distances do not match {k} conditions",
                d.len()
            )));
        }
        Ok(Self { d, estimator, metric, k, m })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn to_json(&self) -> String {
        let file = RdmFile {
            k: self.k,
            m: self.m,
            estimator: self.estimator,
            metric: self.metric,
            pairs: condition_pairs(self.k).into_iter().map(|(i, j)| [i, j]).collect(),
            d: self.d.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&file).expect("rdm serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RdmFile = serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad RDM JSON: {e}")))?;
        let expected: Vec<[usize; 2]> = condition_pairs(file.k).into_iter().map(|(i, j)| [i, j]).collect();
        if file.pairs != expected {
            return Err(Error::invalid("RDM pairs are not in canonical upper-triangular order"));
        }
        Self::new(DVector::from_vec(file.d), file.estimator, file.metric, file.k, file.m)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })
    }

    /// `i,j,d` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,d\n");
        for ((i, j), v) in condition_pairs(self.k).into_iter().zip(self.d.iter()) {
            out.push_str(&format!("{i},{j},{v:?}\n"));
        }
        out
    }

    /// Full symmetric `K × K` dissimilarity matrix with a zero diagonal.
    pub fn to_square(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.k, self.k);
        for ((i, j), &v) in condition_pairs(self.k).into_iter().zip(self.d.iter()) {
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
        out
    }
}

/// `K × K` second-moment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub g: DMatrix<f64>,
    pub estimator: Estimator,
    pub centered: bool,
}

impl SecondMoment {
    /// `d_ij = G_ii + G_jj − G_ij − G_ji` over the canonical pairs.
    pub fn distances(&self) -> DVector<f64> {
        distances_from_second_moment(&self.g)
    }
}

pub fn distances_from_second_moment(g: &DMatrix<f64>) -> DVector<f64> {
    let pairs = condition_pairs(g.nrows());
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| g[(i, i)] + g[(j, j)] - g[(i, j)] - g[(j, i)]),
    )
}

fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.nrows(), (0..a.nrows()).map(|r| a.row(r).dot(&b.row(r))))
}

/// Biased estimate `δ̄ δ̄ᵀ / P` with `δ̄` the across-partition mean difference.
pub fn biased_distances(dataset: &ActivityDataset, c: &ContrastMatrix) -> Result<RdmEstimate> {
    if c.k() != dataset.k() {
        return Err(Error::invalid(format!(
            "contrast matrix is for {} conditions, dataset has {}",
            c.k(),
            dataset.k()
        )));
    }
    let delta = c.matrix() * dataset.mean_pattern();
    let d = DVector::from_iterator(c.d(), delta.row_iter().map(|r| r.norm_squared())) / dataset.p() as f64;
    RdmEstimate::new(d, Estimator::Biased, Metric::Euclidean, dataset.k(), dataset.m())
}

/// Sum over ordered partition pairs `m ≠ n` of row-wise products, computed pair by pair.
pub(crate) fn cross_product_sum_direct(diffs: &[DMatrix<f64>]) -> DVector<f64> {
    let rows = diffs[0].nrows();
    let mut acc = DVector::zeros(rows);
    for m in 0..diffs.len() {
        for n in (m + 1)..diffs.len() {
            acc += row_dots(&diffs[m], &diffs[n]) * 2.0;
        }
    }
    acc
}

/// Same sum via `|Σ_m δ_m|² − Σ_m |δ_m|²`.
pub(crate) fn cross_product_sum_identity(diffs: &[DMatrix<f64>]) -> DVector<f64> {
    let mut total = DMatrix::zeros(diffs[0].nrows(), diffs[0].ncols());
    let mut self_products = DVector::zeros(diffs[0].nrows());
    for delta in diffs {
        total += delta;
        self_products += row_dots(delta, delta);
    }
    row_dots(&total, &total) - self_products
}

/// Crossvalidated estimate `1/(M(M−1)) Σ_m Σ_{n≠m} δ̂_m δ̂_nᵀ / P`.
pub fn unbiased_distances(dataset: &ActivityDataset, c: &ContrastMatrix) -> Result<RdmEstimate> {
    let m = dataset.m();
    if m < 2 {
        return Err(Error::CrossvalidationInfeasible(m));
    }
    let diffs = pattern_differences(dataset, c)?;
    let sum = if m <= DIRECT_SUM_MAX_PARTITIONS {
        cross_product_sum_direct(&diffs)
    } else {
        cross_product_sum_identity(&diffs)
    };
    let d = sum / (m * (m - 1) * dataset.p()) as f64;
    RdmEstimate::new(d, Estimator::Unbiased, Metric::Euclidean, dataset.k(), m)
}

/// Centered second moment of the mean pattern, `H B̄ B̄ᵀ Hᵀ / P`.
pub fn biased_second_moment(dataset: &ActivityDataset) -> SecondMoment {
    let h = linalg::centering(dataset.k());
    let b = &h * dataset.mean_pattern();
    SecondMoment {
        g: &b * b.transpose() / dataset.p() as f64,
        estimator: Estimator::Biased,
        centered: true,
    }
}

/// Crossvalidated centered second moment
/// `1/(M(M−1)) Σ_m Σ_{n≠m} H B̂_m B̂_nᵀ Hᵀ / P`.
pub fn unbiased_second_moment(dataset: &ActivityDataset) -> Result<SecondMoment> {
    let m = dataset.m();
    if m < 2 {
        return Err(Error::CrossvalidationInfeasible(m));
    }
    let h = linalg::centering(dataset.k());
    let centered: Vec<DMatrix<f64>> = dataset.patterns().iter().map(|b| &h * b).collect();
    let mut total = DMatrix::zeros(dataset.k(), dataset.p());
    let mut selfs = DMatrix::zeros(dataset.k(), dataset.k());
    for b in &centered {
        total += b;
        selfs += b * b.transpose();
    }
    let cross = &total * total.transpose() - selfs;
    let g = (&cross + cross.transpose()) * (0.5 / (m * (m - 1) * dataset.p()) as f64);
    Ok(SecondMoment {
        g,
        estimator: Estimator::Unbiased,
        centered: true,
    })
}

/// Precision-weighted pooling of per-partition-pair crossvalidated estimates for
/// designs where each partition has its own condition covariance `Σ_K^m`. Uses the
/// zero-signal covariance `tr(Σ_P Σ_P) Ξ^m ∘ Ξ^n` of each pair estimate.
pub fn pooled_unbiased_distances(
    dataset: &ActivityDataset,
    c: &ContrastMatrix,
    sigma_k_per_partition: &[DMatrix<f64>],
    sigma_p: &DMatrix<f64>,
) -> Result<RdmEstimate> {
    let m = dataset.m();
    if m < 2 {
        return Err(Error::CrossvalidationInfeasible(m));
    }
    if sigma_k_per_partition.len() != m {
        return Err(Error::invalid(format!(
            "{} condition covariances for {m} partitions",
            sigma_k_per_partition.len()
        )));
    }
    if sigma_p.shape() != (dataset.p(), dataset.p()) {
        return Err(Error::invalid("channel covariance does not match the channel count"));
    }
    let tss = linalg::trace_of_square(sigma_p);
    if tss <= 0.0 {
        return Err(Error::invalid("channel covariance is zero"));
    }
    let diffs = pattern_differences(dataset, c)?;
    let mut xis = Vec::with_capacity(m);
    for (idx, s) in sigma_k_per_partition.iter().enumerate() {
        if s.shape() != (dataset.k(), dataset.k()) {
            return Err(Error::invalid(format!("condition covariance {idx} has the wrong shape")));
        }
        linalg::require_psd(s, "sigma_k")?;
        xis.push(c.matrix() * s * c.matrix().transpose());
    }

    let dim = c.d();
    let mut precision_sum = DMatrix::zeros(dim, dim);
    let mut weighted = DVector::zeros(dim);
    for a in 0..m {
        for b in (a + 1)..m {
            // d̂_{a,b} = d̂_{b,a}; both ordered pairs carry the same weight.
            let var = xis[a].component_mul(&xis[b]) * tss;
            let chol = var.cholesky().ok_or_else(|| {
                Error::Regularization(format!("covariance of partition pair ({a}, {b}) is singular"))
            })?;
            let prec = chol.inverse();
            let d_ab = row_dots(&diffs[a], &diffs[b]) / dataset.p() as f64;
            weighted += &prec * d_ab * 2.0;
            precision_sum += prec * 2.0;
        }
    }
    let chol = precision_sum
        .cholesky()
        .ok_or_else(|| Error::Regularization("summed precision is singular".into()))?;
    let d = chol.solve(&weighted);
    RdmEstimate::new(d, Estimator::Unbiased, Metric::Euclidean, dataset.k(), m)
}

fn distances_from_cross_moment(s: &DMatrix<f64>, scale: f64) -> DVector<f64> {
    let k = s.nrows();
    let pairs = crate::dataset::condition_pairs(k);
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| (s[(i, i)] + s[(j, j)] - s[(i, j)] - s[(j, i)]) * scale),
    )
}

/// Biased and crossvalidated Euclidean distances from the cross second moments
/// `(Σ_m B_m)(Σ_n B_n)ᵀ` and `Σ_m B_m B_mᵀ`. Cheaper than forming all pattern
/// differences when `K` is large relative to `P`.
pub(crate) fn moment_distances(patterns: &[DMatrix<f64>]) -> (DVector<f64>, Option<DVector<f64>>) {
    let m = patterns.len();
    let (k, p) = patterns[0].shape();
    let mut total = DMatrix::zeros(k, p);
    let mut self_moment = DMatrix::zeros(k, k);
    for b in patterns {
        total += b;
        self_moment.gemm(1.0, b, &b.transpose(), 1.0);
    }
    let all = &total * total.transpose();
    let biased = distances_from_cross_moment(&all, 1.0 / (m * m * p) as f64);
    let unbiased = (m >= 2).then(|| distances_from_cross_moment(&(all - self_moment), 1.0 / (m * (m - 1) * p) as f64));
    (biased, unbiased)
}

/// Parse a distance vector length into a condition count or fail.
pub fn conditions_for_length(d: usize) -> Result<usize> {
    conditions_for_pairs(d).ok_or_else(|| Error::invalid(format!("{d} is not a valid number of condition pairs")))
}
