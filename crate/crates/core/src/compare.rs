//! RDM similarity criteria and model fitting.
//!
//! Cosine- and Pearson-family criteria are computed as inner products of unit
//! vectors after an optional transform (centering, whitening by `V^{-1/2}`, or
//! ranking). [`Comparator`] builds that transform once so it can be applied to
//! many models and many data vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{null_covariance, whitener, DistanceCovariance};
use crate::dataset::ContrastMatrix;
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::linalg;

/// Values closer than this to the best score count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// A named vector of predicted dissimilarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRdm {
    pub name: String,
    pub m: DVector<f64>,
}

impl ModelRdm {
    pub fn new(name: impl Into<String>, m: DVector<f64>) -> Result<Self> {
        let name = name.into();
        if m.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid(format!("model {name} predicts all-zero dissimilarities")));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("model {name} has non-finite entries")));
        }
        Ok(Self { name, m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Cosine,
    Pearson,
    #[serde(rename = "wuc")]
    WhitenedCosine,
    WhitenedPearson,
    Spearman,
    KendallTauA,
    Cka,
}

impl Criterion {
    pub const ALL: [Criterion; 7] = [
        Criterion::Cosine,
        Criterion::Pearson,
        Criterion::WhitenedCosine,
        Criterion::WhitenedPearson,
        Criterion::Spearman,
        Criterion::KendallTauA,
        Criterion::Cka,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Cosine => "cosine",
            Criterion::Pearson => "pearson",
            Criterion::WhitenedCosine => "wuc",
            Criterion::WhitenedPearson => "whitened_pearson",
            Criterion::Spearman => "spearman",
            Criterion::KendallTauA => "kendall_tau_a",
            Criterion::Cka => "cka",
        }
    }

    /// Distance estimator the criterion is paired with when comparing against data.
    pub fn estimator(self) -> Estimator {
        match self {
            Criterion::Cosine | Criterion::WhitenedCosine => Estimator::Unbiased,
            _ => Estimator::Biased,
        }
    }

    pub fn is_whitened(self) -> bool {
        matches!(self, Criterion::WhitenedCosine | Criterion::WhitenedPearson | Criterion::Cka)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let c = match s {
            "cosine" => Criterion::Cosine,
            "pearson" => Criterion::Pearson,
            "wuc" | "whitened_cosine" => Criterion::WhitenedCosine,
            "whitened_pearson" => Criterion::WhitenedPearson,
            "spearman" => Criterion::Spearman,
            "kendall" | "kendall_tau_a" => Criterion::KendallTauA,
            "cka" => Criterion::Cka,
            other => return Err(Error::invalid(format!("unknown criterion {other:?}"))),
        };
        Ok(c)
    }
}

/// Per-model scores for one criterion plus the winning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub criterion: Criterion,
    pub per_model: BTreeMap<String, f64>,
    pub winner: String,
}

fn check_lengths(d: &DVector<f64>, m: &DVector<f64>) -> Result<()> {
    if d.len() != m.len() {
        return Err(Error::invalid(format!("vector lengths differ: {} vs {}", d.len(), m.len())));
    }
    Ok(())
}

fn unit(v: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::UndefinedSimilarity(format!("{what} has zero norm")));
    }
    Ok(v / n)
}

fn centered(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.mean();
    v.map(|x| x - mean)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// `dᵀm / √((dᵀd)(mᵀm))`.
pub fn cosine_similarity(d: &DVector<f64>, m: &DVector<f64>) -> Result<f64> {
    check_lengths(d, m)?;
    let a = unit(d.clone(), "data vector")?;
    let b = unit(m.clone(), "model vector")?;
    Ok(clamp_unit(a.dot(&b)))
}

pub fn pearson_correlation(d: &DVector<f64>, m: &DVector<f64>) -> Result<f64> {
    check_lengths(d, m)?;
    cosine_similarity_named(&centered(d), &centered(m), "centered")
}

fn cosine_similarity_named(d: &DVector<f64>, m: &DVector<f64>, tag: &str) -> Result<f64> {
    let a = unit(d.clone(), &format!("{tag} data vector"))?;
    let b = unit(m.clone(), &format!("{tag} model vector"))?;
    Ok(clamp_unit(a.dot(&b)))
}

/// `w_max` is the largest absolute entry of `w`, used to judge when `Wv` vanishes.
fn whiten_checked(w: &DMatrix<f64>, w_max: f64, v: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let out = w * v;
    let scale = v.norm() * w_max;
    if out.norm() <= 1e-12 * scale || scale == 0.0 {
        return Err(Error::UndefinedSimilarity(format!("{what} vanishes after whitening")));
    }
    Ok(out)
}

/// Whitened cosine `dᵀV⁻¹m / √((dᵀV⁻¹d)(mᵀV⁻¹m))`, computed as the cosine of `Wd` and `Wm`.
pub fn whitened_cosine(d: &DVector<f64>, m: &DVector<f64>, v: &DistanceCovariance) -> Result<f64> {
    check_lengths(d, m)?;
    check_lengths(d, &v.v.column(0).into_owned())?;
    let w = whitener(v)?;
    let w_max = w.amax();
    let wd = whiten_checked(&w, w_max, d, "data vector")?;
    let wm = whiten_checked(&w, w_max, m, "model vector")?;
    cosine_similarity(&wd, &wm)
}

/// Whitened Pearson: subtract plain means, then whitened cosine.
pub fn whitened_pearson(d: &DVector<f64>, m: &DVector<f64>, v: &DistanceCovariance) -> Result<f64> {
    check_lengths(d, m)?;
    let dc = centered(d);
    let mc = centered(m);
    if dc.norm() == 0.0 || mc.norm() == 0.0 {
        return Err(Error::UndefinedSimilarity("constant vector has no variance".into()));
    }
    whitened_cosine(&dc, &mc, v)
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = DVector::zeros(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Kendall's τ_a: `(concordant − discordant) / (n(n−1)/2)`; tied pairs count as neither.
pub fn kendall_tau_a(d: &DVector<f64>, m: &DVector<f64>) -> Result<f64> {
    check_lengths(d, m)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid("rank correlation needs at least two entries"));
    }
    let mut score: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (d[i] - d[j]).signum_or_zero() * (m[i] - m[j]).signum_or_zero();
            score += s as i64;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Spearman (Pearson of average ranks) and Kendall τ_a.
pub fn rank_correlations(d: &DVector<f64>, m: &DVector<f64>) -> Result<(f64, f64)> {
    check_lengths(d, m)?;
    if d.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two entries"));
    }
    let spearman = pearson_correlation(&average_ranks(d), &average_ranks(m))?;
    Ok((spearman, kendall_tau_a(d, m)?))
}

/// Linear centered kernel alignment between two pattern sets with the same rows.
pub fn linear_cka(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.nrows() < 2 {
        return Err(Error::invalid(format!(
            "pattern sets need the same number (≥ 2) of rows, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let h = linalg::centering(a.nrows());
    let ga = {
        let x = &h * a;
        &x * x.transpose() / a.ncols() as f64
    };
    let gb = {
        let x = &h * b;
        &x * x.transpose() / b.ncols() as f64
    };
    let hsic = |x: &DMatrix<f64>, y: &DMatrix<f64>| x.dot(y);
    let aa = hsic(&ga, &ga);
    let bb = hsic(&gb, &gb);
    let negligible = |g: f64, x: &DMatrix<f64>| g.sqrt() <= 1e-12 * x.norm_squared() / x.ncols() as f64;
    if negligible(aa, a) || negligible(bb, b) {
        return Err(Error::UndefinedSimilarity("centered pattern matrix is zero".into()));
    }
    Ok(clamp_unit(hsic(&ga, &gb) / (aa * bb).sqrt()))
}

/// Weights `θ` minimizing `(d − Σθᵢmᵢ)ᵀ V⁻¹ (d − Σθᵢmᵢ)`, and the minimal loss.
pub fn fit_weighted_model(
    d: &DVector<f64>,
    components: &[ModelRdm],
    v: &DistanceCovariance,
    nonneg: bool,
) -> Result<(DVector<f64>, f64)> {
    if components.is_empty() {
        return Err(Error::DegenerateModel("no model components".into()));
    }
    for c in components {
        check_lengths(d, &c.m)?;
    }
    let w = whitener(v)?;
    let y = &w * d;
    let x = DMatrix::from_columns(&components.iter().map(|c| &w * &c.m).collect::<Vec<_>>());
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * &y;
    let (vals, _) = linalg::sym_eigen(&gram);
    let max = vals[vals.len() - 1];
    if max <= 0.0 || vals[0] <= linalg::REL_EIG_CUTOFF * max {
        return Err(Error::DegenerateModel(
            "model components are linearly dependent on the range of V".into(),
        ));
    }
    let theta = if nonneg {
        projected_coordinate_descent(&gram, &rhs)
    } else {
        gram.clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateModel("normal equations are singular".into()))?
            .solve(&rhs)
    };
    let resid = &y - &x * &theta;
    Ok((theta, resid.norm_squared()))
}

fn projected_coordinate_descent(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = rhs.len();
    let mut theta = DVector::zeros(n);
    for _ in 0..1_000_000 {
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            let grad = gram.row(i).dot(&theta.transpose()) - rhs[i];
            let next = (theta[i] - grad / gram[(i, i)]).max(0.0);
            max_change = max_change.max((next - theta[i]).abs());
            theta[i] = next;
        }
        if max_change < 1e-10 {
            break;
        }
    }
    theta
}

/// Index of the best score; the first of several tied maxima wins.
/// `None` scores (undefined criterion) never win.
pub fn select_winner(scores: &[Option<f64>]) -> Option<usize> {
    let best = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    scores
        .iter()
        .position(|s| matches!(s, Some(v) if *v >= best - TIE_TOLERANCE))
}

/// A criterion with its whitening transform precomputed.
#[derive(Debug, Clone)]
pub struct Comparator {
    criterion: Criterion,
    whitener: Option<DMatrix<f64>>,
    whitener_max: f64,
}

/// A model vector already mapped into the criterion's comparison space.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub name: String,
    raw: DVector<f64>,
    transformed: Option<DVector<f64>>,
}

impl PreparedModel {
    pub fn raw(&self) -> &DVector<f64> {
        &self.raw
    }
}

impl Comparator {
    /// `sigma_k` sets the null covariance used by the whitened criteria (identity
    /// when absent). CKA always whitens with the i.i.d. structure.
    pub fn new(criterion: Criterion, k: usize, sigma_k: Option<&DMatrix<f64>>) -> Result<Self> {
        let whitener = match criterion {
            Criterion::WhitenedCosine | Criterion::WhitenedPearson => {
                let c = ContrastMatrix::new(k)?;
                let id = DMatrix::identity(k, k);
                let v = null_covariance(sigma_k.unwrap_or(&id), &c)?;
                Some(whitener(&v)?)
            }
            Criterion::Cka => {
                let c = ContrastMatrix::new(k)?;
                Some(whitener(&null_covariance(&DMatrix::identity(k, k), &c)?)?)
            }
            _ => None,
        };
        Ok(Self::build(criterion, whitener))
    }

    fn build(criterion: Criterion, whitener: Option<DMatrix<f64>>) -> Self {
        let whitener_max = whitener.as_ref().map_or(0.0, |w| w.amax());
        Self {
            criterion,
            whitener,
            whitener_max,
        }
    }

    /// Use an explicit covariance for the whitened criteria.
    pub fn with_covariance(criterion: Criterion, v: &DistanceCovariance) -> Result<Self> {
        let whitener = criterion.is_whitened().then(|| whitener(v)).transpose()?;
        Ok(Self::build(criterion, whitener))
    }

    /// Use a whitening matrix computed elsewhere (ignored by unwhitened criteria).
    pub(crate) fn with_whitener(criterion: Criterion, whitener: Option<DMatrix<f64>>) -> Self {
        Self::build(criterion, whitener.filter(|_| criterion.is_whitened()))
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    fn transform(&self, v: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
        let base = match self.criterion {
            Criterion::Pearson | Criterion::WhitenedPearson => {
                let c = centered(v);
                if c.norm() == 0.0 {
                    return Err(Error::UndefinedSimilarity(format!("{what} is constant")));
                }
                c
            }
            Criterion::Spearman => {
                let c = centered(&average_ranks(v));
                if c.norm() == 0.0 {
                    return Err(Error::UndefinedSimilarity(format!("{what} has all-tied ranks")));
                }
                c
            }
            _ => v.clone(),
        };
        let out = match &self.whitener {
            Some(w) => whiten_checked(w, self.whitener_max, &base, what)?,
            None => base,
        };
        unit(out, what)
    }

    pub fn prepare(&self, model: &ModelRdm) -> Result<PreparedModel> {
        let transformed = match self.criterion {
            Criterion::KendallTauA => None,
            _ => Some(self.transform(&model.m, &format!("model {}", model.name))?),
        };
        Ok(PreparedModel {
            name: model.name.clone(),
            raw: model.m.clone(),
            transformed,
        })
    }

    /// Score `d` against each prepared model. Returns an error if `d` itself is
    /// degenerate for this criterion.
    pub fn score_all(&self, d: &DVector<f64>, models: &[PreparedModel]) -> Result<Vec<f64>> {
        for m in models {
            check_lengths(d, &m.raw)?;
        }
        match self.criterion {
            Criterion::KendallTauA => models.iter().map(|m| kendall_tau_a(d, &m.raw)).collect(),
            _ => {
                let td = self.transform(d, "data vector")?;
                Ok(models
                    .iter()
                    .map(|m| clamp_unit(td.dot(m.transformed.as_ref().expect("prepared"))))
                    .collect())
            }
        }
    }

    pub fn score(&self, d: &DVector<f64>, model: &ModelRdm) -> Result<f64> {
        let prepared = self.prepare(model)?;
        Ok(self.score_all(d, std::slice::from_ref(&prepared))?[0])
    }
}

/// Compare a data vector against several models with one criterion.
pub fn compare_models(
    d: &DVector<f64>,
    models: &[ModelRdm],
    criterion: Criterion,
    sigma_k: Option<&DMatrix<f64>>,
) -> Result<ComparisonResult> {
    if models.is_empty() {
        return Err(Error::invalid("no models to compare"));
    }
    let k = crate::estimators::conditions_for_length(d.len())?;
    let cmp = Comparator::new(criterion, k, sigma_k)?;
    let prepared = models.iter().map(|m| cmp.prepare(m)).collect::<Result<Vec<_>>>()?;
    let scores = cmp.score_all(d, &prepared)?;
    let as_opt: Vec<Option<f64>> = scores.iter().copied().map(Some).collect();
    let winner = select_winner(&as_opt).expect("scores are finite");
    Ok(ComparisonResult {
        criterion,
        per_model: models.iter().map(|m| m.name.clone()).zip(scores).collect(),
        winner: models[winner].name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::null_covariance;
    use crate::dataset::build_contrast_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_vec(n: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn iid_v(k: usize) -> DistanceCovariance {
        null_covariance(&DMatrix::identity(k, k), &build_contrast_matrix(k).unwrap()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let a = v(&[1.0, 2.0, 2.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 3.0])).unwrap(), 0.0);
        let c = cosine_similarity(&a, &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn whitened_cosine_with_identity_is_plain_cosine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d = random_vec(6, &mut rng);
        let m = random_vec(6, &mut rng);
        let id = DistanceCovariance::identity(4);
        assert!((whitened_cosine(&d, &m, &id).unwrap() - cosine_similarity(&d, &m).unwrap()).abs() < 1e-12);
        assert!((whitened_cosine(&d, &d, &iid_v(4)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn whitened_cosine_matches_explicit_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let vv = iid_v(5);
        let inv = vv.v.clone().try_inverse().unwrap();
        for _ in 0..20 {
            let d = random_vec(10, &mut rng);
            let m = random_vec(10, &mut rng);
            let q = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * &inv * b)[(0, 0)];
            let explicit = q(&d, &m) / (q(&d, &d) * q(&m, &m)).sqrt();
            assert!((whitened_cosine(&d, &m, &vv).unwrap() - explicit).abs() < 1e-12);
        }
    }

    #[test]
    fn whitened_cosine_rejects_annihilated_vector() {
        // V with a null direction along e_0
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 0)] = 0.0;
        let vv = DistanceCovariance::new(m, crate::covariance::CovarianceKind::NullModel, 3).unwrap();
        let res = whitened_cosine(&v(&[1.0, 0.0, 0.0]), &v(&[1.0, 1.0, 1.0]), &vv);
        assert!(matches!(res, Err(Error::UndefinedSimilarity(_))));
    }

    #[test]
    fn whitened_pearson_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = random_vec(6, &mut rng);
        let m = random_vec(6, &mut rng);
        let id = DistanceCovariance::identity(4);
        let plain = pearson_correlation(&d, &m).unwrap();
        assert!((whitened_pearson(&d, &m, &id).unwrap() - plain).abs() < 1e-12);
        let vv = iid_v(4);
        let base = whitened_pearson(&d, &m, &vv).unwrap();
        let affine = m.map(|x| 3.0 * x + 7.0);
        assert!((whitened_pearson(&d, &affine, &vv).unwrap() - base).abs() < 1e-12);
        let dc = d.map(|x| x - d.mean());
        let mc = m.map(|x| x - m.mean());
        assert!((whitened_cosine(&dc, &mc, &vv).unwrap() - base).abs() < 1e-12);
        assert!(matches!(
            whitened_pearson(&DVector::from_element(6, 2.0), &m, &vv),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn rank_correlation_cases() {
        let a = v(&[1.0, 2.0, 3.0, 4.0]);
        let (s, t) = rank_correlations(&a, &v(&[10.0, 20.0, 30.0, 40.0])).unwrap();
        assert!((s - 1.0).abs() < 1e-15 && (t - 1.0).abs() < 1e-15);
        let (s, t) = rank_correlations(&a, &v(&[4.0, 3.0, 2.0, 1.0])).unwrap();
        assert!((s + 1.0).abs() < 1e-15 && (t + 1.0).abs() < 1e-15);
        let (_, t) = rank_correlations(&a, &v(&[1.0, 3.0, 2.0, 4.0])).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-15);
        assert!(rank_correlations(&v(&[1.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn ties_get_average_ranks_and_shrink_tau_a() {
        assert_eq!(average_ranks(&v(&[3.0, 1.0, 3.0, 2.0])).as_slice(), &[3.5, 1.0, 3.5, 2.0]);
        let t = kendall_tau_a(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 1.0, 2.0])).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cka_cases() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(6, 5, |_, _| StandardNormal.sample(&mut rng));
        assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let q = DMatrix::from_fn(5, 5, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        assert!((linear_cka(&a, &(&a * q)).unwrap() - 1.0).abs() < 1e-12);
        let constant = DMatrix::from_fn(6, 3, |_, j| j as f64);
        assert!(matches!(linear_cka(&a, &constant), Err(Error::UndefinedSimilarity(_))));
    }

    #[test]
    fn cka_equals_whitened_cosine_of_biased_distances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let k = 6;
        let a = DMatrix::from_fn(k, 4, |_, _| StandardNormal.sample(&mut rng));
        let b = DMatrix::from_fn(k, 7, |_, _| StandardNormal.sample(&mut rng));
        let c = build_contrast_matrix(k).unwrap();
        let da = crate::estimators::biased_distances(&crate::dataset::ActivityDataset::new(vec![a.clone()], None).unwrap(), &c).unwrap();
        let db = crate::estimators::biased_distances(&crate::dataset::ActivityDataset::new(vec![b.clone()], None).unwrap(), &c).unwrap();
        let wc = whitened_cosine(&da.d, &db.d, &iid_v(k)).unwrap();
        assert!((linear_cka(&a, &b).unwrap() - wc).abs() < 1e-10);
    }

    #[test]
    fn single_component_least_squares() {
        let d = v(&[1.0, 2.0, 3.0]);
        let m = ModelRdm::new("a", v(&[1.0, 1.0, 0.0])).unwrap();
        let (theta, _) = fit_weighted_model(&d, &[m], &DistanceCovariance::identity(3), false).unwrap();
        assert!((theta[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_two_component_recovery() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let m1 = random_vec(10, &mut rng);
        let m2 = random_vec(10, &mut rng);
        let d = &m1 * 2.0 + &m2 * 3.0;
        let comps = [ModelRdm::new("a", m1).unwrap(), ModelRdm::new("b", m2).unwrap()];
        for nonneg in [false, true] {
            let (theta, loss) = fit_weighted_model(&d, &comps, &iid_v(5), nonneg).unwrap();
            assert!((theta[0] - 2.0).abs() < 1e-9 && (theta[1] - 3.0).abs() < 1e-9, "{theta}");
            assert!(loss < 1e-9);
        }
    }

    #[test]
    fn fit_is_optimal_against_perturbations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let comps: Vec<_> = (0..3)
            .map(|i| ModelRdm::new(format!("m{i}"), random_vec(10, &mut rng)).unwrap())
            .collect();
        let d = random_vec(10, &mut rng);
        let vv = iid_v(5);
        let (theta, loss) = fit_weighted_model(&d, &comps, &vv, false).unwrap();
        let inv = vv.v.clone().try_inverse().unwrap();
        let loss_at = |t: &DVector<f64>| {
            let mut pred = DVector::zeros(10);
            for (c, w) in comps.iter().zip(t.iter()) {
                pred += &c.m * *w;
            }
            let r = &d - pred;
            (r.transpose() * &inv * &r)[(0, 0)]
        };
        assert!((loss_at(&theta) - loss).abs() < 1e-9 * loss.max(1.0));
        for _ in 0..1000 {
            let step = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            assert!(loss_at(&(&theta + step)) >= loss - 1e-12);
        }
    }

    #[test]
    fn nonnegative_fit_clips_weights() {
        let m1 = v(&[1.0, 0.0, 0.0]);
        let m2 = v(&[0.0, 1.0, 0.0]);
        let d = v(&[2.0, -1.0, 0.0]);
        let comps = [ModelRdm::new("a", m1).unwrap(), ModelRdm::new("b", m2).unwrap()];
        let (theta, loss) = fit_weighted_model(&d, &comps, &DistanceCovariance::identity(3), true).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-10 && theta[1] == 0.0);
        assert!((loss - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let m1 = v(&[1.0, 2.0, 3.0]);
        let comps = [ModelRdm::new("a", m1.clone()).unwrap(), ModelRdm::new("b", m1 * 2.0).unwrap()];
        let res = fit_weighted_model(&v(&[1.0, 1.0, 1.0]), &comps, &DistanceCovariance::identity(3), false);
        assert!(matches!(res, Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn winner_selection_prefers_first_tie() {
        assert_eq!(select_winner(&[Some(0.5), Some(0.9), Some(0.9)]), Some(1));
        assert_eq!(select_winner(&[None, Some(-0.2)]), Some(1));
        assert_eq!(select_winner(&[None, None]), None);
    }

    #[test]
    fn compare_models_picks_closest_angle() {
        let d = v(&[1.0, 0.0, 0.2]);
        let models = [
            ModelRdm::new("far", v(&[0.0, 1.0, 0.0])).unwrap(),
            ModelRdm::new("near", v(&[1.0, 0.1, 0.1])).unwrap(),
        ];
        let res = compare_models(&d, &models, Criterion::Cosine, None).unwrap();
        assert_eq!(res.winner, "near");
        assert_eq!(res.per_model.len(), 2);
    }

    #[test]
    fn comparator_agrees_with_free_functions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let d = random_vec(10, &mut rng);
        let m = ModelRdm::new("m", random_vec(10, &mut rng)).unwrap();
        let vv = iid_v(5);
        let (s, t) = rank_correlations(&d, &m.m).unwrap();
        let expected = [
            (Criterion::Cosine, cosine_similarity(&d, &m.m).unwrap()),
            (Criterion::Pearson, pearson_correlation(&d, &m.m).unwrap()),
            (Criterion::WhitenedCosine, whitened_cosine(&d, &m.m, &vv).unwrap()),
            (Criterion::WhitenedPearson, whitened_pearson(&d, &m.m, &vv).unwrap()),
            (Criterion::Spearman, s),
            (Criterion::KendallTauA, t),
            (Criterion::Cka, whitened_cosine(&d, &m.m, &vv).unwrap()),
        ];
        for (crit, want) in expected {
            let got = Comparator::new(crit, 5, None).unwrap().score(&d, &m).unwrap();
            assert!((got - want).abs() < 1e-12, "{crit}: {got} vs {want}");
        }
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("nope".parse::<Criterion>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn criteria_are_bounded_and_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = random_vec(10, &mut rng);
            let m = ModelRdm::new("m", random_vec(10, &mut rng)).unwrap();
            let scaled = ModelRdm::new("m", &m.m * beta).unwrap();
            for crit in Criterion::ALL {
                let cmp = Comparator::new(crit, 5, None).unwrap();
                let a = cmp.score(&d, &m).unwrap();
                let b = cmp.score(&(&d * alpha), &scaled).unwrap();
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                prop_assert!((a - b).abs() < 1e-10, "{}: {} vs {}", crit, a, b);
            }
        }

        #[test]
        fn whitened_criteria_ignore_scale_of_v(seed in any::<u64>(), scale in 1e-6f64..1e6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = random_vec(10, &mut rng);
            let m = random_vec(10, &mut rng);
            let vv = iid_v(5);
            let big = vv.scaled(scale);
            prop_assert!((whitened_cosine(&d, &m, &vv).unwrap() - whitened_cosine(&d, &m, &big).unwrap()).abs() < 1e-10);
            prop_assert!((whitened_pearson(&d, &m, &vv).unwrap() - whitened_pearson(&d, &m, &big).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn disjoint_supports_give_zero_wuc(seed in any::<u64>(), split in 1usize..9) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = DVector::from_fn(10, |i, _| if i < split { rng.random_range(0.1..2.0) } else { 0.0 });
            let m = DVector::from_fn(10, |i, _| if i >= split { rng.random_range(0.1..2.0) } else { 0.0 });
            let w = whitened_cosine(&d, &m, &DistanceCovariance::identity(5)).unwrap();
            prop_assert!(w.abs() < 1e-15);
        }

        #[test]
        fn cka_matches_whitened_cosine(seed in any::<u64>(), k in 3usize..8, p in 1usize..6, q in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(k, p, |_, _| StandardNormal.sample(&mut rng));
            let b = DMatrix::from_fn(k, q, |_, _| StandardNormal.sample(&mut rng));
            let c = build_contrast_matrix(k).unwrap();
            let da = crate::estimators::distances_from_second_moment(&(&a * a.transpose()));
            let db = crate::estimators::distances_from_second_moment(&(&b * b.transpose()));
            let wc = whitened_cosine(&da, &db, &null_covariance(&DMatrix::identity(k, k), &c).unwrap()).unwrap();
            prop_assert!((linear_cka(&a, &b).unwrap() - wc).abs() < 1e-10);
        }
    }
}
