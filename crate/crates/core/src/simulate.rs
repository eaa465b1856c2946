//! Matrix-normal data generation and the model-selection accuracy harness.
//!
//! Every trial draws from its own ChaCha8 substream `(seed, trial)`, so results
//! do not depend on thread count or scheduling. Counts are reduced by integer
//! addition.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compare::{select_winner, Comparator, Criterion, ModelRdm, PreparedModel};
use crate::covariance::{null_covariance, whitener};
use crate::dataset::{pair_count, ActivityDataset, ContrastMatrix};
use crate::error::{Error, Result};
use crate::estimators::{distances_from_second_moment, moment_distances, Estimator};
use crate::linalg;

/// Distribution of the i.i.d. entries of the noise matrix before coloring.
/// All variants have zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Chi2Df6,
    TDf6,
}

impl NoiseDistribution {
    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseDistribution::Gaussian => StandardNormal.sample(rng),
            NoiseDistribution::Chi2Df6 => {
                let x: f64 = ChiSquared::new(6.0).expect("valid df").sample(rng);
                (x - 6.0) / 12f64.sqrt()
            }
            NoiseDistribution::TDf6 => {
                let x: f64 = StudentT::new(6.0).expect("valid df").sample(rng);
                x / 1.5f64.sqrt()
            }
        }
    }

    fn matrix(self, rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        match self {
            NoiseDistribution::Gaussian => DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng)),
            _ => DMatrix::from_fn(rows, cols, |_, _| self.draw(rng)),
        }
    }
}

/// Matrix of i.i.d. standard normal draws.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    NoiseDistribution::Gaussian.matrix(rows, cols, rng)
}

/// Signal patterns `B` (K×P) whose second moment `BBᵀ/P` equals `g·s` exactly.
pub fn generate_signal(g: &DMatrix<f64>, s: f64, p: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    linalg::require_psd(g, "signal second moment")?;
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("signal strength must be finite and ≥ 0, got {s}")));
    }
    let root = linalg::psd_sqrt(&(g * s));
    signal_from_root(&root, p, rng)
}

fn signal_from_root(root: &DMatrix<f64>, p: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let k = root.nrows();
    if p < k {
        return Err(Error::InsufficientChannels { k, p });
    }
    let z = standard_normal(k, p, rng);
    if root.iter().all(|&x| x == 0.0) {
        return Ok(DMatrix::zeros(k, p));
    }
    let s = &z * z.transpose() / p as f64;
    let white = linalg::spd_inv_sqrt(&s)? * z;
    Ok(root * white)
}

/// Matrix-normal noise `Σ_K^{1/2} Z Σ_P^{1/2}`.
pub fn generate_noise(sigma_k: &DMatrix<f64>, sigma_p: &DMatrix<f64>, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    linalg::require_psd(sigma_k, "Σ_K")?;
    linalg::require_psd(sigma_p, "Σ_P")?;
    let z = standard_normal(sigma_k.nrows(), sigma_p.nrows(), rng);
    Ok(linalg::psd_sqrt(sigma_k) * z * linalg::psd_sqrt(sigma_p))
}

/// Noise covariance on a 3-D voxel grid, `exp(−d²/s2)` with `d` the distance in voxel widths.
/// `s2 = 0` gives the identity.
pub fn gaussian_spatial_covariance(grid: [usize; 3], s2: f64) -> Result<DMatrix<f64>> {
    if !(s2 >= 0.0 && s2.is_finite()) {
        return Err(Error::invalid(format!("kernel variance must be finite and ≥ 0, got {s2}")));
    }
    let coords: Vec<[f64; 3]> = (0..grid[0])
        .flat_map(|x| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |z| [x as f64, y as f64, z as f64])))
        .collect();
    let n = coords.len();
    if s2 == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d2: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
        (-d2 / s2).exp()
    }))
}

/// Symmetric square root, skipping the eigendecomposition for diagonal input so
/// identity covariances reproduce i.i.d. draws exactly.
fn covariance_root(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0));
    if diagonal {
        if (0..n).all(|i| m[(i, i)] == 1.0) {
            return None;
        }
        return Some(DMatrix::from_diagonal(&m.diagonal().map(|x| x.max(0.0).sqrt())));
    }
    Some(linalg::psd_sqrt(m))
}

/// A data-generating candidate: its second moment and implied distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateRaw")]
pub struct CandidateModel {
    pub name: String,
    #[serde(with = "linalg::serde_rows")]
    pub g: DMatrix<f64>,
    #[serde(with = "linalg::serde_vec")]
    pub rdm: DVector<f64>,
}

#[derive(Deserialize)]
struct CandidateRaw {
    name: String,
    #[serde(default)]
    g: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    rdm: Option<Vec<f64>>,
}

impl TryFrom<CandidateRaw> for CandidateModel {
    type Error = Error;
    fn try_from(raw: CandidateRaw) -> Result<Self> {
        match (raw.g, raw.rdm) {
            (Some(g), _) => CandidateModel::from_g(raw.name, linalg::from_rows(&g)?),
            (None, Some(rdm)) => CandidateModel::from_rdm(raw.name, &DVector::from_vec(rdm)),
            (None, None) => Err(Error::invalid(format!("candidate {} needs `g` or `rdm`", raw.name))),
        }
    }
}

impl CandidateModel {
    pub fn from_g(name: impl Into<String>, g: DMatrix<f64>) -> Result<Self> {
        linalg::require_psd(&g, "candidate second moment")?;
        let rdm = distances_from_second_moment(&g);
        let name = name.into();
        ModelRdm::new(name.clone(), rdm.clone())?;
        Ok(Self { name, g, rdm })
    }

    /// Second moment `−½ H D H` of a squared-distance RDM; negative eigenvalues
    /// (non-Euclidean input) are clipped.
    pub fn from_rdm(name: impl Into<String>, rdm: &DVector<f64>) -> Result<Self> {
        let k = crate::estimators::conditions_for_length(rdm.len())?;
        let mut sq = DMatrix::zeros(k, k);
        for (a, (i, j)) in crate::dataset::condition_pairs(k).into_iter().enumerate() {
            sq[(i, j)] = rdm[a];
            sq[(j, i)] = rdm[a];
        }
        let h = linalg::centering(k);
        let g = -0.5 * &h * sq * &h;
        let (vals, vecs) = linalg::sym_eigen(&g);
        Self::from_g(name, linalg::spectral_map(&vals, &vecs, |l| l.max(0.0)))
    }

    /// Rescale so the RDM has unit Euclidean norm.
    pub fn normalized(self) -> Self {
        let n = self.rdm.norm();
        Self {
            name: self.name,
            g: self.g / n,
            rdm: self.rdm / n,
        }
    }

    pub fn model_rdm(&self) -> ModelRdm {
        ModelRdm {
            name: self.name.clone(),
            m: self.rdm.clone(),
        }
    }
}

/// Column (channel) noise covariance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelNoise {
    #[default]
    Identity,
    Matrix {
        #[serde(with = "linalg::serde_rows")]
        sigma_p: DMatrix<f64>,
    },
    GaussianKernel { grid: [usize; 3], s2: f64 },
}

impl ChannelNoise {
    pub fn matrix(&self, p: usize) -> Result<DMatrix<f64>> {
        let m = match self {
            ChannelNoise::Identity => DMatrix::identity(p, p),
            ChannelNoise::Matrix { sigma_p } => sigma_p.clone(),
            ChannelNoise::GaussianKernel { grid, s2 } => gaussian_spatial_covariance(*grid, *s2)?,
        };
        if m.nrows() != p {
            return Err(Error::invalid(format!("channel covariance is {}x{}, expected P={p}", m.nrows(), m.ncols())));
        }
        linalg::require_psd(&m, "Σ_P")?;
        Ok(m)
    }
}

/// A family of operating points evaluated on the same random substreams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sweep {
    /// Vary the number of partitions.
    Partitions { values: Vec<usize> },
    /// Vary the signal strength.
    SignalStrength { values: Vec<f64> },
    /// Relabel partition pairs as extra conditions `steps` times, doubling K and
    /// halving M each time. All levels reuse the same underlying data.
    ConditionSplit { steps: usize },
    /// Vary the width of a Gaussian spatial noise kernel on a voxel grid.
    SpatialKernel { grid: [usize; 3], s2: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub k: usize,
    pub p: usize,
    pub m: usize,
    pub signal_strength: f64,
    /// Per-partition noise variance.
    pub noise_variance: f64,
    /// Multiply the noise variance by M, keeping the variance of the mean pattern fixed.
    #[serde(default)]
    pub scale_noise_with_partitions: bool,
    #[serde(with = "linalg::serde_rows")]
    pub sigma_k: DMatrix<f64>,
    #[serde(default)]
    pub sigma_p: ChannelNoise,
    #[serde(default)]
    pub noise: NoiseDistribution,
    pub candidate_models: Vec<CandidateModel>,
    pub n_sims: u64,
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::invalid(format!("scenario JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!("need at least 2 conditions, got {}", self.k)));
        }
        if self.m < 2 {
            return Err(Error::CrossvalidationInfeasible(self.m));
        }
        if self.n_sims == 0 {
            return Err(Error::invalid("n_sims must be positive"));
        }
        if self.candidate_models.len() < 2 {
            return Err(Error::invalid("need at least two candidate models"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::invalid("signal strength must be finite and ≥ 0"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::invalid("noise variance must be finite and ≥ 0"));
        }
        if self.sigma_k.shape() != (self.k, self.k) {
            return Err(Error::invalid(format!("Σ_K must be {0}x{0}", self.k)));
        }
        linalg::require_psd(&self.sigma_k, "Σ_K")?;
        for c in &self.candidate_models {
            if c.g.shape() != (self.k, self.k) || c.rdm.len() != pair_count(self.k) {
                return Err(Error::invalid(format!("candidate {} does not have {} conditions", c.name, self.k)));
            }
        }
        if self.p < self.k {
            return Err(Error::InsufficientChannels { k: self.k, p: self.p });
        }
        match &self.sweep {
            Some(Sweep::Partitions { values }) if values.iter().any(|&m| m < 2) || values.is_empty() => {
                Err(Error::invalid("partition sweep needs values ≥ 2"))
            }
            Some(Sweep::SignalStrength { values }) if values.is_empty() || values.iter().any(|&s| s.is_nan() || s < 0.0) => {
                Err(Error::invalid("signal sweep needs values ≥ 0"))
            }
            Some(Sweep::ConditionSplit { steps }) => {
                let f = 1usize << steps;
                if !self.m.is_multiple_of(f) || self.m / f < 2 {
                    return Err(Error::invalid(format!(
                        "{} partitions cannot be split {steps} times and keep at least 2",
                        self.m
                    )));
                }
                Ok(())
            }
            Some(Sweep::SpatialKernel { grid, s2 }) => {
                if grid.iter().product::<usize>() != self.p || s2.is_empty() {
                    return Err(Error::invalid("spatial sweep grid must have P voxels and at least one s2"));
                }
                Ok(())
            }
            _ => {
                self.sigma_p.matrix(self.p)?;
                Ok(())
            }
        }
    }

    pub fn with_signal_strength(mut self, s: f64) -> Self {
        self.signal_strength = s;
        self
    }

    pub fn with_sims(mut self, n: u64) -> Self {
        self.n_sims = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sweep(mut self, sweep: Option<Sweep>) -> Self {
        self.sweep = sweep;
        self
    }

    pub fn model_names(&self) -> Vec<String> {
        self.candidate_models.iter().map(|c| c.name.clone()).collect()
    }
}

/// Σ_K with correlation `r` between neighboring conditions.
pub fn neighbor_correlated(k: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| match i.abs_diff(j) {
        0 => 1.0,
        1 => r,
        _ => 0.0,
    })
}

fn categorical_rdm(groups: &[usize], within: f64, between: f64) -> DVector<f64> {
    let pairs = crate::dataset::condition_pairs(groups.len());
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| if groups[i] == groups[j] { within } else { between }),
    )
}

fn pearson(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    crate::compare::pearson_correlation(a, b).expect("non-constant model RDMs")
}

/// Mix `b` into `a` until their RDMs correlate at `target`.
fn matched_pair(a: &DMatrix<f64>, c: &DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let ra = distances_from_second_moment(a);
    let rc = distances_from_second_moment(c);
    let corr = |t: f64| pearson(&ra, &(&ra * (1.0 - t) + &rc * t));
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if corr(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    a * (1.0 - t) + c * t
}

fn finger_models() -> (DMatrix<f64>, DMatrix<f64>) {
    let u = DVector::from_fn(5, |i, _| i as f64 - 2.0);
    let a = DMatrix::identity(5, 5) + &u * u.transpose() * 0.5;
    let mut e1 = DVector::zeros(5);
    e1[0] = 1.0;
    let w = DVector::from_column_slice(&[0.0, 1.0, -1.0, 1.0, -1.0]);
    let c = DMatrix::identity(5, 5) + &e1 * e1.transpose() * 2.0 + &w * w.transpose();
    (a, c)
}

/// 31×5 membership of all non-empty five-finger chords.
fn chord_membership() -> DMatrix<f64> {
    DMatrix::from_fn(31, 5, |r, f| (((r + 1) >> f) & 1) as f64)
}

fn pair_from_g(names: [&str; 2], a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Vec<CandidateModel>> {
    Ok(vec![
        CandidateModel::from_g(names[0], a)?.normalized(),
        CandidateModel::from_g(names[1], b)?.normalized(),
    ])
}

pub const SCENARIO_NAMES: [&str; 8] = [
    "fig4a",
    "fig4b",
    "fig4c",
    "fig4d",
    "exp1_like",
    "exp2_like",
    "cond_split_fig7",
    "spatial_noise_appendix",
];

/// Built-in scenarios.
pub fn scenario_library(name: &str) -> Result<Scenario> {
    let fig4 = |name: &str, p: usize, sigma_k: DMatrix<f64>, models: [(&str, DVector<f64>); 2], s: f64| -> Result<Scenario> {
        Ok(Scenario {
            name: name.into(),
            k: 4,
            p,
            m: 4,
            signal_strength: s,
            noise_variance: 1.0,
            scale_noise_with_partitions: true,
            sigma_k,
            sigma_p: ChannelNoise::Identity,
            noise: NoiseDistribution::Gaussian,
            candidate_models: models
                .into_iter()
                .map(|(n, r)| CandidateModel::from_rdm(n, &r))
                .collect::<Result<_>>()?,
            n_sims: 2000,
            seed: 1,
            sweep: Some(Sweep::Partitions {
                values: vec![2, 4, 6, 8, 10, 12],
            }),
        })
    };
    let ab = [0, 0, 1, 1];
    let ac = [0, 1, 0, 1];
    let exp = |name: &str, k: usize, models: Vec<CandidateModel>, s: f64| Scenario {
        name: name.into(),
        k,
        p: 160,
        m: 8,
        signal_strength: s,
        noise_variance: 1.0,
        scale_noise_with_partitions: false,
        sigma_k: DMatrix::identity(k, k),
        sigma_p: ChannelNoise::Identity,
        noise: NoiseDistribution::Gaussian,
        candidate_models: models,
        n_sims: 3000,
        seed: 1,
        sweep: None,
    };
    let (fa, fc) = finger_models();
    let finger_pair = || pair_from_g(["muscle", "natural_stats"], fa.clone(), matched_pair(&fa, &fc, 0.85));
    let chord_pair = || {
        let x = chord_membership();
        let a = &x * &fa * x.transpose();
        let c = &x * &fc * x.transpose();
        let b = matched_pair(&a, &c, 0.85);
        pair_from_g(["muscle", "natural_stats"], a, b)
    };
    let scenario = match name {
        "fig4a" => fig4(
            "fig4a",
            20,
            neighbor_correlated(4, 0.15),
            [("model1", categorical_rdm(&ab, 0.5, 1.0)), ("model2", categorical_rdm(&ac, 0.5, 1.0))],
            0.5,
        )?,
        "fig4b" => fig4(
            "fig4b",
            50,
            DMatrix::identity(4, 4),
            [("model1", categorical_rdm(&ab, 0.5, 1.0)), ("model2", categorical_rdm(&ac, 0.5, 1.0))],
            0.5,
        )?,
        "fig4c" => {
            let m1 = categorical_rdm(&ab, 1.0, 2.0);
            let m2 = categorical_rdm(&ab, 1.0, 4.0);
            let (n1, n2) = (m1.norm(), m2.norm());
            let mut s = fig4("fig4c", 50, DMatrix::identity(4, 4), [("model1", m1 / n1), ("model2", m2 / n2)], 1.0)?;
            s.sweep = Some(Sweep::SignalStrength {
                values: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            });
            s
        }
        "fig4d" => fig4(
            "fig4d",
            50,
            DMatrix::identity(4, 4),
            [("model1", categorical_rdm(&ab, 0.2, 1.0)), ("model2", categorical_rdm(&ac, 0.6, 1.0))],
            0.5,
        )?,
        "exp1_like" => {
            let mut s = exp("exp1_like", 5, finger_pair()?, 0.1);
            s.sweep = Some(Sweep::SignalStrength {
                values: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            });
            s
        }
        "exp2_like" => {
            let mut s = exp("exp2_like", 31, chord_pair()?, 0.1);
            s.sweep = Some(Sweep::SignalStrength {
                values: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            });
            s
        }
        "cond_split_fig7" => {
            let mut s = exp("cond_split_fig7", 5, finger_pair()?, 0.05);
            s.m = 32;
            s.sweep = Some(Sweep::ConditionSplit { steps: 3 });
            s
        }
        "spatial_noise_appendix" => {
            let mut s = exp("spatial_noise_appendix", 31, chord_pair()?, 0.3);
            s.p = 216;
            s.sweep = Some(Sweep::SpatialKernel {
                grid: [6, 6, 6],
                s2: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            });
            s
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown scenario {other:?}; expected one of {}",
                SCENARIO_NAMES.join(", ")
            )))
        }
    };
    Ok(scenario)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionStats {
    pub accuracy: f64,
    pub se: f64,
    /// Fraction of pure-noise draws assigned to each candidate (candidate order).
    pub null_split: Vec<f64>,
    pub null_se: Vec<f64>,
    /// Data draws on which the criterion was undefined (counted as errors).
    pub undefined_draws: u64,
    pub null_undefined_draws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub label: String,
    pub k: usize,
    pub m: usize,
    pub p: usize,
    pub signal_strength: f64,
    pub results: BTreeMap<Criterion, CriterionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub scenario: String,
    pub n_sims: u64,
    pub seed: u64,
    pub models: Vec<String>,
    pub levels: Vec<LevelReport>,
}

impl AccuracyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn level(&self, label: &str) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.label == label)
    }
}

impl LevelReport {
    pub fn stats(&self, c: Criterion) -> &CriterionStats {
        &self.results[&c]
    }
}

#[derive(Debug, Clone)]
struct GenPlan {
    k: usize,
    m: usize,
    p: usize,
    signal_roots: Vec<DMatrix<f64>>,
    noise_root_k: Option<DMatrix<f64>>,
    noise_root_p: Option<DMatrix<f64>>,
    noise_sd: f64,
    dist: NoiseDistribution,
}

impl GenPlan {
    fn draw(&self, signal: Option<usize>, rng: &mut ChaCha8Rng) -> Result<ActivityDataset> {
        let b = match signal {
            Some(j) => signal_from_root(&self.signal_roots[j], self.p, rng)?,
            None => DMatrix::zeros(self.k, self.p),
        };
        // one draw for all partitions stacked, so channel coloring is a single product
        let mut z = self.dist.matrix(self.m * self.k, self.p, rng);
        if let Some(rp) = &self.noise_root_p {
            z *= rp;
        }
        let patterns = (0..self.m)
            .map(|m| {
                let mut e = z.rows(m * self.k, self.k).into_owned();
                if let Some(rk) = &self.noise_root_k {
                    e = rk * e;
                }
                &b + e * self.noise_sd
            })
            .collect();
        ActivityDataset::new(patterns, None)
    }
}

struct CriterionPlan {
    criterion: Criterion,
    comparator: Comparator,
    models: Vec<PreparedModel>,
}

struct LevelPlan {
    report: LevelReport,
    gen: usize,
    stack: usize,
    criteria: Vec<CriterionPlan>,
}

#[derive(Debug, Clone, Default)]
struct Counts {
    correct: u64,
    undefined: u64,
    null: Vec<u64>,
    null_undefined: u64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.correct += o.correct;
        self.undefined += o.undefined;
        self.null_undefined += o.null_undefined;
        if self.null.is_empty() {
            self.null = vec![0; o.null.len()];
        }
        for (a, b) in self.null.iter_mut().zip(&o.null) {
            *a += b;
        }
    }
}

fn kron_ones(g: &DMatrix<f64>, f: usize) -> DMatrix<f64> {
    DMatrix::from_element(f, f, 1.0).kronecker(g)
}

fn kron_identity(g: &DMatrix<f64>, f: usize) -> DMatrix<f64> {
    DMatrix::identity(f, f).kronecker(g)
}

struct Plan {
    gens: Vec<GenPlan>,
    levels: Vec<LevelPlan>,
    n_models: usize,
}

fn build_plan(s: &Scenario, criteria: &[Criterion]) -> Result<Plan> {
    s.validate()?;
    if criteria.is_empty() {
        return Err(Error::invalid("no criteria requested"));
    }
    let gen_plan = |m: usize, strength: f64, sigma_p: &DMatrix<f64>| -> GenPlan {
        let var = if s.scale_noise_with_partitions {
            s.noise_variance * m as f64
        } else {
            s.noise_variance
        };
        GenPlan {
            k: s.k,
            m,
            p: s.p,
            signal_roots: s
                .candidate_models
                .iter()
                .map(|c| linalg::psd_sqrt(&(&c.g * strength)))
                .collect(),
            noise_root_k: covariance_root(&s.sigma_k),
            noise_root_p: covariance_root(sigma_p),
            noise_sd: var.sqrt(),
            dist: s.noise,
        }
    };
    let cache: RefCell<Vec<(DMatrix<f64>, DMatrix<f64>)>> = RefCell::new(Vec::new());
    let cached_whitener = |k: usize, sigma_k: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        if let Some((_, w)) = cache.borrow().iter().find(|(sk, _)| sk == sigma_k) {
            return Ok(w.clone());
        }
        let w = whitener(&null_covariance(sigma_k, &ContrastMatrix::new(k)?)?)?;
        cache.borrow_mut().push((sigma_k.clone(), w.clone()));
        Ok(w)
    };
    let level = |label: String, gen: usize, stack: usize, g: &GenPlan, strength: f64| -> Result<LevelPlan> {
        let f = 1usize << stack;
        let k = s.k * f;
        let sigma_k = kron_identity(&s.sigma_k, f);
        let models: Vec<ModelRdm> = s
            .candidate_models
            .iter()
            .map(|c| ModelRdm::new(c.name.clone(), distances_from_second_moment(&kron_ones(&c.g, f))))
            .collect::<Result<_>>()?;
        let criteria = criteria
            .iter()
            .map(|&criterion| {
                let comparator = match criterion {
                    Criterion::WhitenedCosine | Criterion::WhitenedPearson => {
                        Comparator::with_whitener(criterion, Some(cached_whitener(k, &sigma_k)?))
                    }
                    Criterion::Cka => Comparator::with_whitener(criterion, Some(cached_whitener(k, &DMatrix::identity(k, k))?)),
                    _ => Comparator::with_whitener(criterion, None),
                };
                let models = models.iter().map(|m| comparator.prepare(m)).collect::<Result<_>>()?;
                Ok(CriterionPlan {
                    criterion,
                    comparator,
                    models,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LevelPlan {
            report: LevelReport {
                label,
                k,
                m: g.m / f,
                p: g.p,
                signal_strength: strength,
                results: BTreeMap::new(),
            },
            gen,
            stack,
            criteria,
        })
    };
    let base_sigma_p = || s.sigma_p.matrix(s.p);
    let mut gens = Vec::new();
    let mut levels = Vec::new();
    match &s.sweep {
        None => {
            gens.push(gen_plan(s.m, s.signal_strength, &base_sigma_p()?));
            levels.push(level("base".into(), 0, 0, &gens[0], s.signal_strength)?);
        }
        Some(Sweep::Partitions { values }) => {
            let sp = base_sigma_p()?;
            for (i, &m) in values.iter().enumerate() {
                gens.push(gen_plan(m, s.signal_strength, &sp));
                levels.push(level(format!("m={m}"), i, 0, &gens[i], s.signal_strength)?);
            }
        }
        Some(Sweep::SignalStrength { values }) => {
            let sp = base_sigma_p()?;
            for (i, &v) in values.iter().enumerate() {
                gens.push(gen_plan(s.m, v, &sp));
                levels.push(level(format!("s={v}"), i, 0, &gens[i], v)?);
            }
        }
        Some(Sweep::ConditionSplit { steps }) => {
            gens.push(gen_plan(s.m, s.signal_strength, &base_sigma_p()?));
            for step in 0..=*steps {
                let k = s.k << step;
                levels.push(level(format!("k={k}"), 0, step, &gens[0], s.signal_strength)?);
            }
        }
        Some(Sweep::SpatialKernel { grid, s2 }) => {
            for (i, &v) in s2.iter().enumerate() {
                let sp = gaussian_spatial_covariance(*grid, v)?;
                gens.push(gen_plan(s.m, s.signal_strength, &sp));
                levels.push(level(format!("s2={v}"), i, 0, &gens[i], s.signal_strength)?);
            }
        }
    }
    Ok(Plan {
        gens,
        levels,
        n_models: s.candidate_models.len(),
    })
}

struct Estimates {
    biased: Option<DVector<f64>>,
    unbiased: Option<DVector<f64>>,
}

fn estimates(level: &LevelPlan, data: &ActivityDataset) -> Result<Estimates> {
    let mut data = data.clone();
    for _ in 0..level.stack {
        data = data.stack_partition_pairs()?;
    }
    let (biased, unbiased) = moment_distances(data.patterns());
    if unbiased.is_none() && level.criteria.iter().any(|c| c.criterion.estimator() == Estimator::Unbiased) {
        return Err(Error::CrossvalidationInfeasible(data.m()));
    }
    Ok(Estimates {
        biased: Some(biased),
        unbiased,
    })
}

/// Winner (candidate index) for each criterion, `None` where the criterion is undefined.
fn decide(level: &LevelPlan, est: &Estimates, order: &[usize]) -> Vec<Option<usize>> {
    level
        .criteria
        .iter()
        .map(|cp| {
            let d = match cp.criterion.estimator() {
                Estimator::Biased => est.biased.as_ref(),
                Estimator::Unbiased => est.unbiased.as_ref(),
            }
            .expect("estimate computed");
            let scores = cp.comparator.score_all(d, &cp.models).ok()?;
            let as_opt: Vec<Option<f64>> = order.iter().map(|&i| Some(scores[i]).filter(|x| x.is_finite())).collect();
            select_winner(&as_opt).map(|w| order[w])
        })
        .collect()
}

fn run_trial(plan: &Plan, seed: u64, trial: u64) -> Result<Vec<Vec<Counts>>> {
    let mut out: Vec<Vec<Counts>> = plan
        .levels
        .iter()
        .map(|l| {
            l.criteria
                .iter()
                .map(|_| Counts {
                    null: vec![0; plan.n_models],
                    ..Counts::default()
                })
                .collect()
        })
        .collect();
    for (g_idx, gen) in plan.gens.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let level_ids: Vec<usize> = (0..plan.levels.len()).filter(|&i| plan.levels[i].gen == g_idx).collect();
        let mut order: Vec<usize> = (0..plan.n_models).collect();
        for truth in 0..plan.n_models {
            let data = gen.draw(Some(truth), &mut rng)?;
            order.shuffle(&mut rng);
            for &li in &level_ids {
                let est = estimates(&plan.levels[li], &data)?;
                for (ci, w) in decide(&plan.levels[li], &est, &order).into_iter().enumerate() {
                    match w {
                        Some(w) if w == truth => out[li][ci].correct += 1,
                        Some(_) => {}
                        None => out[li][ci].undefined += 1,
                    }
                }
            }
        }
        let data = gen.draw(None, &mut rng)?;
        order.shuffle(&mut rng);
        for &li in &level_ids {
            let est = estimates(&plan.levels[li], &data)?;
            for (ci, w) in decide(&plan.levels[li], &est, &order).into_iter().enumerate() {
                match w {
                    Some(w) => out[li][ci].null[w] += 1,
                    None => out[li][ci].null_undefined += 1,
                }
            }
        }
    }
    Ok(out)
}

/// Options for [`run_scenario_with`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Worker threads; `None` uses rayon's default pool.
    pub threads: Option<usize>,
    /// Called with (completed, total) trials after each block.
    pub progress: Option<&'a (dyn Fn(u64, u64) + Sync)>,
}

pub fn run_scenario(scenario: &Scenario, criteria: &[Criterion]) -> Result<AccuracyReport> {
    run_scenario_with(scenario, criteria, &RunOptions::default())
}

pub fn run_scenario_with(scenario: &Scenario, criteria: &[Criterion], opts: &RunOptions) -> Result<AccuracyReport> {
    let plan = build_plan(scenario, criteria)?;
    let run = || -> Result<Vec<Vec<Counts>>> {
        let mut total: Option<Vec<Vec<Counts>>> = None;
        let block = 256u64;
        let mut start = 0u64;
        while start < scenario.n_sims {
            let end = (start + block).min(scenario.n_sims);
            let part = (start..end)
                .into_par_iter()
                .map(|t| run_trial(&plan, scenario.seed, t))
                .try_reduce_with(|mut a, b| {
                    for (la, lb) in a.iter_mut().zip(&b) {
                        for (ca, cb) in la.iter_mut().zip(lb) {
                            ca.add(cb);
                        }
                    }
                    Ok(a)
                })
                .expect("non-empty block")?;
            match &mut total {
                None => total = Some(part),
                Some(acc) => {
                    for (la, lb) in acc.iter_mut().zip(&part) {
                        for (ca, cb) in la.iter_mut().zip(lb) {
                            ca.add(cb);
                        }
                    }
                }
            }
            if let Some(cb) = opts.progress {
                cb(end, scenario.n_sims);
            }
            start = end;
        }
        Ok(total.expect("n_sims ≥ 1"))
    };
    let counts = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let draws = scenario.n_sims * plan.n_models as u64;
    let levels = plan
        .levels
        .iter()
        .zip(counts)
        .map(|(lp, lc)| {
            let mut report = lp.report.clone();
            for (cp, c) in lp.criteria.iter().zip(lc) {
                let accuracy = c.correct as f64 / draws as f64;
                let defined = scenario.n_sims - c.null_undefined;
                let split: Vec<f64> = c
                    .null
                    .iter()
                    .map(|&x| if defined > 0 { x as f64 / defined as f64 } else { f64::NAN })
                    .collect();
                let null_se = split
                    .iter()
                    .map(|f| if defined > 0 { (f * (1.0 - f) / defined as f64).sqrt() } else { f64::NAN })
                    .collect();
                report.results.insert(
                    cp.criterion,
                    CriterionStats {
                        accuracy,
                        se: (accuracy * (1.0 - accuracy) / draws as f64).sqrt(),
                        null_split: split,
                        null_se,
                        undefined_draws: c.undefined,
                        null_undefined_draws: c.null_undefined,
                    },
                );
            }
            report
        })
        .collect();
    Ok(AccuracyReport {
        scenario: scenario.name.clone(),
        n_sims: scenario.n_sims,
        seed: scenario.seed,
        models: scenario.model_names(),
        levels,
    })
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseDistribution::Gaussian => "gaussian",
            NoiseDistribution::Chi2Df6 => "chi2_df6",
            NoiseDistribution::TDf6 => "t_df6",
        })
    }
}

impl FromStr for NoiseDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseDistribution::Gaussian),
            "chi2_df6" => Ok(NoiseDistribution::Chi2Df6),
            "t_df6" => Ok(NoiseDistribution::TDf6),
            other => Err(Error::invalid(format!("unknown noise distribution {other:?}"))),
        }
    }
}
