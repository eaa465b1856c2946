use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use rdmkit::dataset::{condition_pairs, read_csv_matrix};
use rdmkit::estimators::conditions_for_length;
use rdmkit::noise::{prewhiten_from_residuals, DEFAULT_SHRINKAGE};
use rdmkit::simulate::{run_scenario_with, RunOptions, SCENARIO_NAMES};
use rdmkit::{
    biased_distances, build_contrast_matrix, compare_models, load_dataset, null_covariance, scenario_library,
    unbiased_distances, whitener, Criterion, Estimator, Metric, ModelRdm, RdmEstimate, Scenario,
};

use crate::args::{CompareArgs, DistancesArgs, Method, MetricArg, SimulateArgs, WhitenArgs};
use crate::failure::Failure;
use crate::output::{check_destination, require_file, write_atomic};

fn read_sigma_k(path: Option<&PathBuf>, k: usize) -> Result<Option<DMatrix<f64>>, Failure> {
    let Some(path) = path else { return Ok(None) };
    require_file(path, "Σ_K file")?;
    let m = read_csv_matrix(path)?;
    if m.shape() != (k, k) {
        return Err(Failure::input(format!(
            "{}: Σ_K is {}x{}, expected {k}x{k}",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(Some(m))
}

pub fn distances(a: &DistancesArgs) -> Result<(), Failure> {
    require_file(&a.data, "manifest")?;
    check_destination(&a.out)?;
    let dataset = load_dataset(&a.data)?;
    log::info!("loaded K={} P={} M={}", dataset.k(), dataset.p(), dataset.m());
    let (dataset, metric) = match a.metric {
        MetricArg::Euclidean => (dataset, Metric::Euclidean),
        MetricArg::Mahalanobis => {
            let h = a.shrink.unwrap_or(DEFAULT_SHRINKAGE);
            (prewhiten_from_residuals(&dataset, h, a.regressors)?, Metric::Mahalanobis)
        }
    };
    let c = build_contrast_matrix(dataset.k())?;
    let est = match a.method {
        Method::Biased => biased_distances(&dataset, &c)?,
        Method::Crossval => unbiased_distances(&dataset, &c)?,
    };
    write_atomic(&a.out, &est.with_metric(metric).to_json())
}

#[derive(Serialize)]
struct WhitenedRdm {
    k: usize,
    m: usize,
    estimator: Estimator,
    metric: Metric,
    pairs: Vec<[usize; 2]>,
    whitened: Vec<f64>,
}

pub fn whiten(a: &WhitenArgs) -> Result<(), Failure> {
    require_file(&a.rdm, "RDM file")?;
    check_destination(&a.out)?;
    let est = RdmEstimate::read_json(&a.rdm)?;
    let sigma_k = read_sigma_k(a.sigma_k.as_ref(), est.k)?.unwrap_or_else(|| DMatrix::identity(est.k, est.k));
    let c = build_contrast_matrix(est.k)?;
    let w = whitener(&null_covariance(&sigma_k, &c)?)?;
    let out = WhitenedRdm {
        k: est.k,
        m: est.m,
        estimator: est.estimator,
        metric: est.metric,
        pairs: condition_pairs(est.k).into_iter().map(|(i, j)| [i, j]).collect(),
        whitened: (w * &est.d).iter().copied().collect(),
    };
    write_atomic(&a.out, &serde_json::to_string_pretty(&out).expect("serializes"))
}

/// A model RDM file: `d` in canonical pair order and an optional name (the file
/// stem otherwise). Other fields, such as those of an RDM estimate, are ignored.
#[derive(Deserialize)]
struct ModelFile {
    name: Option<String>,
    d: Vec<f64>,
}

fn read_models(dir: &Path, d_len: usize) -> Result<Vec<ModelRdm>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("model directory {} not found", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::input(format!("no model JSON files in {}", dir.display())));
    }
    let mut models: Vec<ModelRdm> = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        if file.d.len() != d_len {
            return Err(Failure::usage(format!(
                "{}: model has {} distances but the data RDM has {d_len}",
                path.display(),
                file.d.len()
            )));
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = file.name.unwrap_or(stem);
        if models.iter().any(|m| m.name == name) {
            return Err(Failure::input(format!("{}: duplicate model name {name:?}", path.display())));
        }
        let model = ModelRdm::new(name, file.d.into())
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        models.push(model);
    }
    Ok(models)
}

pub fn compare(a: &CompareArgs) -> Result<(), Failure> {
    require_file(&a.rdm, "RDM file")?;
    check_destination(&a.out)?;
    let est = RdmEstimate::read_json(&a.rdm)?;
    let models = read_models(&a.models, est.d.len())?;
    let sigma_k = read_sigma_k(a.sigma_k.as_ref(), conditions_for_length(est.d.len())?)?;
    if sigma_k.is_some() && !a.criterion.is_whitened() {
        log::warn!("--sigma-k has no effect on {}", a.criterion);
    }
    let result = compare_models(&est.d, &models, a.criterion, sigma_k.as_ref())?;
    log::info!("winner: {}", result.winner);
    write_atomic(&a.out, &serde_json::to_string_pretty(&result).expect("serializes"))
}

fn resolve_scenario(spec: &str) -> Result<Scenario, Failure> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{spec}: {e}")))?;
        return Scenario::from_json(&text).map_err(|e| Failure::input(format!("{spec}: {e}")));
    }
    if SCENARIO_NAMES.contains(&spec) {
        return Ok(scenario_library(spec)?);
    }
    Err(Failure::usage(format!(
        "unknown scenario {spec:?}: not a file and not one of {}",
        SCENARIO_NAMES.join(", ")
    )))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    check_destination(&a.out)?;
    let mut scenario = resolve_scenario(&a.scenario)?;
    if let Some(n) = a.sims {
        scenario = scenario.with_sims(n);
    }
    if let Some(seed) = a.seed {
        scenario = scenario.with_seed(seed);
    }
    let criteria: Vec<Criterion> = if a.criteria.is_empty() {
        Criterion::ALL.to_vec()
    } else {
        let mut c = a.criteria.clone();
        c.sort();
        c.dedup();
        c
    };
    log::info!(
        "scenario {}: K={} P={} M={} s={} sims={} seed={}",
        scenario.name,
        scenario.k,
        scenario.p,
        scenario.m,
        scenario.signal_strength,
        scenario.n_sims,
        scenario.seed
    );
    let start = Instant::now();
    let progress = |done: u64, total: u64| log::info!("{done}/{total} simulations");
    let opts = RunOptions {
        threads: a.threads.map(|t| t as usize),
        progress: Some(&progress),
    };
    let report = run_scenario_with(&scenario, &criteria, &opts)?;
    log::info!("finished in {:.2}s", start.elapsed().as_secs_f64());
    write_atomic(&a.out, &report.to_json())
}
