//! Fast numerical checks of the library against closed-form results.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdmkit::compare::{linear_cka, whitened_cosine};
use rdmkit::covariance::{full_covariance, xi_matrix};
use rdmkit::linalg;
use rdmkit::simulate::standard_normal;
use rdmkit::{biased_distances, null_covariance, unbiased_distances, ActivityDataset, ContrastMatrix, Estimator};

use crate::args::{Fault, SelftestArgs};
use crate::failure::Failure;

/// Sampling checks allow this many standard errors.
const Z_LIMIT: f64 = 4.0;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn null_v(k: usize, fault: Option<Fault>) -> DMatrix<f64> {
    let c = ContrastMatrix::new(k).expect("k ≥ 2");
    let mut v = null_covariance(&DMatrix::identity(k, k), &c).expect("valid").v;
    if fault == Some(Fault::NullCovariance) {
        v[(0, 0)] *= 1.05;
    }
    v
}

fn eigenstructure(fault: Option<Fault>) -> Check {
    let mut worst = 0.0f64;
    for k in [5usize, 10, 18, 40] {
        let (vals, _) = linalg::sym_eigen(&null_v(k, fault));
        let d = vals.len();
        let small = k * (k - 3) / 2;
        for (i, &lam) in vals.iter().enumerate() {
            let expected = if i < small {
                1.0
            } else if i < d - 1 {
                k as f64 / 2.0
            } else {
                k as f64
            };
            worst = worst.max((lam / vals[0] - expected).abs() / expected);
        }
    }
    Check {
        name: "eigenstructure",
        pass: worst < 1e-9,
        detail: format!("eigenvalue ratios K : K/2 : 1, max relative error {worst:.1e}"),
    }
}

fn null_correlation() -> Check {
    let k = 5;
    let c = ContrastMatrix::new(k).expect("k ≥ 2");
    let corr = null_covariance(&DMatrix::identity(k, k), &c).expect("valid").correlation();
    let pairs = c.pairs();
    let mut worst = 0.0f64;
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(x, y)) in pairs.iter().enumerate() {
            let expected = if a == b {
                1.0
            } else if i == x || i == y || j == x || j == y {
                0.25
            } else {
                0.0
            };
            worst = worst.max((corr[(a, b)] - expected).abs());
        }
    }
    Check {
        name: "null_correlation",
        pass: worst < 1e-12,
        detail: format!("shared-condition pairs 0.25, disjoint pairs 0, max error {worst:.1e}"),
    }
}

fn cka_equivalence(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for t in 0..100 {
        let k = 3 + t % 6;
        let a = standard_normal(k, 2 + t % 9, rng);
        let b = standard_normal(k, 3 + t % 7, rng);
        let c = ContrastMatrix::new(k).expect("k ≥ 2");
        let d = |x: &DMatrix<f64>| {
            let ds = ActivityDataset::new(vec![x.clone()], None).expect("valid");
            biased_distances(&ds, &c).expect("valid").d
        };
        let v = null_covariance(&DMatrix::identity(k, k), &c).expect("valid");
        let diff = match (whitened_cosine(&d(&a), &d(&b), &v), linear_cka(&a, &b)) {
            (Ok(w), Ok(cka)) => (w - cka).abs(),
            _ => f64::INFINITY,
        };
        worst = worst.max(diff);
    }
    Check {
        name: "cka_equivalence",
        pass: worst < 1e-10,
        detail: format!("100 random pattern pairs, max |difference| {worst:.1e}"),
    }
}

struct Draws {
    biased: Vec<DVector<f64>>,
    unbiased: Vec<DVector<f64>>,
}

fn draw(b: &DMatrix<f64>, m: usize, root_p: &DMatrix<f64>, n: u64, rng: &mut ChaCha8Rng) -> Draws {
    let c = ContrastMatrix::new(b.nrows()).expect("k ≥ 2");
    let mut out = Draws {
        biased: Vec::new(),
        unbiased: Vec::new(),
    };
    for _ in 0..n {
        let patterns = (0..m).map(|_| b + standard_normal(b.nrows(), b.ncols(), rng) * root_p).collect();
        let ds = ActivityDataset::new(patterns, None).expect("valid");
        out.biased.push(biased_distances(&ds, &c).expect("valid").d);
        out.unbiased.push(unbiased_distances(&ds, &c).expect("m ≥ 2").d);
    }
    out
}

fn mean(xs: &[DVector<f64>]) -> DVector<f64> {
    xs.iter().fold(DVector::zeros(xs[0].len()), |acc, x| acc + x) / xs.len() as f64
}

/// Sample covariance with the standard error of every entry.
fn covariance(xs: &[DVector<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let mu = mean(xs);
    let d = mu.len();
    let n = xs.len() as f64;
    let (mut s1, mut s2) = (DMatrix::zeros(d, d), DMatrix::zeros(d, d));
    for x in xs {
        let c = x - &mu;
        let o = &c * c.transpose();
        s2 += o.component_mul(&o);
        s1 += o;
    }
    let m1 = &s1 / n;
    let var = &s2 / n - m1.component_mul(&m1);
    (s1 / (n - 1.0), var.map(|v| (v.max(0.0) / n).sqrt()))
}

fn distance_means(n: u64, rng: &mut ChaCha8Rng) -> Check {
    let (k, p, m, t) = (3, 20, 4, 0.5);
    let b = DMatrix::from_fn(k, p, |i, j| if i == j { (t * p as f64 / 2.0).sqrt() } else { 0.0 });
    let draws = draw(&b, m, &DMatrix::identity(p, p), n, rng);
    let z = |xs: &[DVector<f64>], target: f64| {
        let (cov, _) = covariance(xs);
        let mu = mean(xs);
        (0..mu.len())
            .map(|i| (mu[i] - target).abs() / (cov[(i, i)] / n as f64).sqrt())
            .fold(0.0, f64::max)
    };
    let zu = z(&draws.unbiased, t);
    let zb = z(&draws.biased, t + 2.0 / m as f64);
    Check {
        name: "distance_means",
        pass: zu < Z_LIMIT && zb < Z_LIMIT,
        detail: format!("crossvalidated mean vs truth |z| {zu:.2}, biased offset vs 2/M |z| {zb:.2}"),
    }
}

fn distance_covariance(n: u64, rng: &mut ChaCha8Rng) -> Check {
    let (k, p, m) = (3, 5, 4);
    let a = standard_normal(p, p, rng);
    let raw = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
    let sigma_p = &raw * (p as f64 / linalg::trace(&raw));
    let b = standard_normal(k, p, rng) * 0.6;
    let c = ContrastMatrix::new(k).expect("k ≥ 2");
    let xi = xi_matrix(&DMatrix::identity(k, k), &c).expect("valid");
    let draws = draw(&b, m, &linalg::psd_sqrt(&sigma_p), n, rng);
    let mut worst = 0.0f64;
    for (est, xs) in [(Estimator::Biased, &draws.biased), (Estimator::Unbiased, &draws.unbiased)] {
        let analytic = full_covariance(est, &(c.matrix() * &b), &sigma_p, &xi, m).expect("valid").v;
        let (emp, se) = covariance(xs);
        for i in 0..c.d() {
            for j in 0..c.d() {
                worst = worst.max((emp[(i, j)] - analytic[(i, j)]).abs() / se[(i, j)]);
            }
        }
    }
    Check {
        name: "distance_covariance",
        pass: worst < Z_LIMIT,
        detail: format!("empirical vs analytic covariance, max |z| {worst:.2}"),
    }
}

pub fn run(a: &SelftestArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    if a.inject_fault.is_some() {
        log::warn!("fault injection active");
    }
    let checks = [
        eigenstructure(a.inject_fault),
        null_correlation(),
        cka_equivalence(&mut rng),
        distance_means(a.sims, &mut rng),
        distance_covariance(a.sims, &mut rng),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    log::info!("selftest finished in {:.2}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numerical(format!("failed checks: {}", failed.join(", "))))
    }
}
