//! Partitioned activity-pattern data, pairwise contrasts, and file ingestion.
//!
//! A dataset holds `M` independent estimates (partitions) of a `K × P` pattern
//! matrix: one row per condition, one column per measurement channel. Condition
//! pairs are always enumerated in upper-triangular row-major order
//! `(0,1), (0,2), …, (K-2,K-1)` and that order is shared by every distance vector
//! in the crate.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of unordered condition pairs.
pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Canonical pair list for `k` conditions.
pub fn condition_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(pair_count(k));
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Recover `k` from a distance-vector length, if it is triangular.
pub fn conditions_for_pairs(d: usize) -> Option<usize> {
    let k = ((1.0 + (1.0 + 8.0 * d as f64).sqrt()) / 2.0).round() as usize;
    (k >= 2 && pair_count(k) == d).then_some(k)
}

/// `D × K` matrix mapping condition patterns to pairwise pattern differences.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    c: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
}

impl ContrastMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 conditions, got {k}")));
        }
        let pairs = condition_pairs(k);
        let mut c = DMatrix::zeros(pairs.len(), k);
        for (row, &(i, j)) in pairs.iter().enumerate() {
            c[(row, i)] = 1.0;
            c[(row, j)] = -1.0;
        }
        Ok(Self { c, pairs })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn k(&self) -> usize {
        self.c.ncols()
    }

    pub fn d(&self) -> usize {
        self.c.nrows()
    }
}

/// Shorthand for [`ContrastMatrix::new`].
pub fn build_contrast_matrix(k: usize) -> Result<ContrastMatrix> {
    ContrastMatrix::new(k)
}

/// `M` partitions of `K × P` pattern estimates, plus optional per-partition residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityDataset {
    k: usize,
    p: usize,
    patterns: Vec<DMatrix<f64>>,
    residuals: Option<Vec<DMatrix<f64>>>,
}

impl ActivityDataset {
    pub fn new(patterns: Vec<DMatrix<f64>>, residuals: Option<Vec<DMatrix<f64>>>) -> Result<Self> {
        let first = patterns
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one partition"))?;
        let (k, p) = first.shape();
        if k == 0 || p == 0 {
            return Err(Error::invalid("pattern matrices must be non-empty"));
        }
        for (m, b) in patterns.iter().enumerate() {
            if b.shape() != (k, p) {
                return Err(Error::invalid(format!(
                    "partition {m} is {}x{}, expected {k}x{p}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if let Some(pos) = b.iter().position(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "partition {m} has a non-finite value at row {}, column {}",
                    pos % k,
                    pos / k
                )));
            }
        }
        if let Some(res) = &residuals {
            if res.len() != patterns.len() {
                return Err(Error::invalid(format!(
                    "{} residual matrices for {} partitions",
                    res.len(),
                    patterns.len()
                )));
            }
            for (m, r) in res.iter().enumerate() {
                if r.ncols() != p {
                    return Err(Error::invalid(format!(
                        "residuals of partition {m} have {} columns, expected {p}",
                        r.ncols()
                    )));
                }
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("residuals of partition {m} contain non-finite values")));
                }
            }
        }
        Ok(Self { k, p, patterns, residuals })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.patterns.len()
    }

    pub fn patterns(&self) -> &[DMatrix<f64>] {
        &self.patterns
    }

    pub fn residuals(&self) -> Option<&[DMatrix<f64>]> {
        self.residuals.as_deref()
    }

    pub fn with_residuals(self, residuals: Option<Vec<DMatrix<f64>>>) -> Result<Self> {
        Self::new(self.patterns, residuals)
    }

    /// Across-partition mean pattern matrix.
    pub fn mean_pattern(&self) -> DMatrix<f64> {
        let mut sum = DMatrix::zeros(self.k, self.p);
        for b in &self.patterns {
            sum += b;
        }
        sum / self.m() as f64
    }

    /// Apply `f` to every pattern matrix, keeping residuals.
    pub fn map_patterns(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::new(self.patterns.iter().map(f).collect(), self.residuals.clone())
    }

    /// Merge consecutive partition pairs into single partitions with twice the
    /// conditions: partition `2j` supplies conditions `0..K`, partition `2j+1`
    /// supplies `K..2K`. The result has `2K` conditions and `M/2` partitions.
    pub fn stack_partition_pairs(&self) -> Result<Self> {
        if !self.m().is_multiple_of(2) || self.m() < 2 {
            return Err(Error::invalid(format!(
                "need an even number of partitions to relabel, got {}",
                self.m()
            )));
        }
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            out.rows_mut(0, a.nrows()).copy_from(a);
            out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            out
        };
        let patterns = self
            .patterns
            .chunks_exact(2)
            .map(|pair| stack(&pair[0], &pair[1]))
            .collect();
        let residuals = self
            .residuals
            .as_ref()
            .map(|r| r.chunks_exact(2).map(|pair| stack(&pair[0], &pair[1])).collect());
        Self::new(patterns, residuals)
    }
}

/// Element-wise square root of every pattern matrix; residuals are left alone.
pub fn sqrt_transform(dataset: &ActivityDataset) -> Result<ActivityDataset> {
    for (m, b) in dataset.patterns().iter().enumerate() {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                let v = b[(i, j)];
                if v < 0.0 {
                    return Err(Error::Domain {
                        partition: m,
                        row: i,
                        column: j,
                        value: v,
                    });
                }
            }
        }
    }
    dataset.map_patterns(|b| b.map(f64::sqrt))
}

/// `C · B̂_m` for every partition.
pub fn pattern_differences(dataset: &ActivityDataset, c: &ContrastMatrix) -> Result<Vec<DMatrix<f64>>> {
    if c.k() != dataset.k() {
        return Err(Error::invalid(format!(
            "contrast matrix is for {} conditions, dataset has {}",
            c.k(),
            dataset.k()
        )));
    }
    Ok(dataset.patterns().iter().map(|b| c.matrix() * b).collect())
}

/// On-disk description of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub k: usize,
    pub p: usize,
    pub m: usize,
    pub partitions: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<PathBuf>>,
}

/// Read a headerless numeric CSV into a matrix.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let values = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                    path: path.to_path_buf(),
                    row,
                    message: format!("column {}: cannot parse {cell:?} as a number", col + 1),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Ingestion {
                        path: path.to_path_buf(),
                        row,
                        message: format!("column {}: non-finite value {cell:?}", col + 1),
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != values.len() {
                return Err(Error::Ingestion {
                    path: path.to_path_buf(),
                    row,
                    message: format!("expected {} columns, found {}", first.len(), values.len()),
                });
            }
        }
        rows.push(values);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Write a matrix as headerless CSV using shortest round-trip float formatting.
pub fn write_csv_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn expect_shape(path: &Path, m: &DMatrix<f64>, rows: Option<usize>, cols: usize) -> Result<()> {
    if let Some(r) = rows {
        if m.nrows() != r {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                row: m.nrows().min(r) + 1,
                message: format!("shape mismatch: expected {r} rows, found {}", m.nrows()),
            });
        }
    }
    if m.nrows() > 0 && m.ncols() != cols {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            row: 1,
            message: format!("shape mismatch: expected {cols} columns, found {}", m.ncols()),
        });
    }
    Ok(())
}

/// Load a dataset from a JSON manifest. Paths inside the manifest are relative
/// to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<ActivityDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|source| Error::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        path: manifest_path.to_path_buf(),
        row: e.line(),
        message: e.to_string(),
    })?;
    let manifest_err = |message: String| Error::Ingestion {
        path: manifest_path.to_path_buf(),
        row: 0,
        message,
    };
    if manifest.partitions.len() != manifest.m {
        return Err(manifest_err(format!(
            "m = {} but {} partition files listed",
            manifest.m,
            manifest.partitions.len()
        )));
    }
    if manifest.k == 0 || manifest.p == 0 || manifest.m == 0 {
        return Err(manifest_err("k, p and m must be positive".into()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut patterns = Vec::with_capacity(manifest.m);
    for rel in &manifest.partitions {
        let path = base.join(rel);
        let b = read_csv_matrix(&path)?;
        expect_shape(&path, &b, Some(manifest.k), manifest.p)?;
        patterns.push(b);
    }
    let residuals = match &manifest.residuals {
        None => None,
        Some(files) => {
            if files.len() != manifest.m {
                return Err(manifest_err(format!(
                    "m = {} but {} residual files listed",
                    manifest.m,
                    files.len()
                )));
            }
            let mut res = Vec::with_capacity(files.len());
            for rel in files {
                let path = base.join(rel);
                let r = read_csv_matrix(&path)?;
                expect_shape(&path, &r, None, manifest.p)?;
                res.push(r);
            }
            Some(res)
        }
    };
    ActivityDataset::new(patterns, residuals).map_err(|e| manifest_err(e.to_string()))
}

/// Write `dataset` next to `manifest_path` as `<stem>_partNN.csv` files plus the manifest.
pub fn write_dataset(dataset: &ActivityDataset, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let mut partitions = Vec::new();
    for (m, b) in dataset.patterns().iter().enumerate() {
        let name = PathBuf::from(format!("{stem}_part{m:02}.csv"));
        write_csv_matrix(&dir.join(&name), b)?;
        partitions.push(name);
    }
    let residuals = match dataset.residuals() {
        None => None,
        Some(res) => {
            let mut names = Vec::new();
            for (m, r) in res.iter().enumerate() {
                let name = PathBuf::from(format!("{stem}_resid{m:02}.csv"));
                write_csv_matrix(&dir.join(&name), r)?;
                names.push(name);
            }
            Some(names)
        }
    };
    let manifest = Manifest {
        k: dataset.k(),
        p: dataset.p(),
        m: dataset.m(),
        partitions,
        residuals,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, json).map_err(|source| Error::Io {
        path: manifest_path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn contrast_two_conditions() {
        let c = build_contrast_matrix(2).unwrap();
        assert_eq!(c.d(), 1);
        assert_eq!(c.matrix().as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn contrast_three_conditions() {
        let c = build_contrast_matrix(3).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1., -1., 0., 1., 0., -1., 0., 1., -1.]);
        assert_eq!(c.matrix(), &expected);
        assert_eq!(c.pairs(), &[(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn contrast_five_conditions_has_ten_pairs() {
        assert_eq!(build_contrast_matrix(5).unwrap().d(), 10);
    }

    #[test]
    fn contrast_rejects_single_condition() {
        assert!(matches!(build_contrast_matrix(1), Err(Error::InvalidArgument(_))));
        assert!(build_contrast_matrix(0).is_err());
    }

    #[test]
    fn contrast_rows_sum_to_zero_and_gram_structure() {
        for k in 2..=12 {
            let c = build_contrast_matrix(k).unwrap();
            for row in c.matrix().row_iter() {
                assert_eq!(row.sum(), 0.0);
                assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&x| x == -1.0).count(), 1);
            }
            let g = c.matrix() * c.matrix().transpose();
            for i in 0..c.d() {
                for j in 0..c.d() {
                    let v = g[(i, j)];
                    if i == j {
                        assert_eq!(v, 2.0);
                    } else {
                        assert!(v == -1.0 || v == 0.0 || v == 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pairs_round_trip_count() {
        for k in 2..50 {
            assert_eq!(conditions_for_pairs(pair_count(k)), Some(k));
        }
        assert_eq!(conditions_for_pairs(4), None);
    }

    #[test]
    fn sqrt_transform_cases() {
        let zeros = ActivityDataset::new(vec![DMatrix::zeros(2, 3); 2], None).unwrap();
        assert_eq!(sqrt_transform(&zeros).unwrap(), zeros);

        let four = ActivityDataset::new(vec![DMatrix::from_element(1, 1, 4.0)], None).unwrap();
        assert_eq!(sqrt_transform(&four).unwrap().patterns()[0][(0, 0)], 2.0);

        let mut neg = DMatrix::from_element(2, 2, 1.0);
        neg[(1, 0)] = -1.0;
        let ds = ActivityDataset::new(vec![DMatrix::from_element(2, 2, 1.0), neg], None).unwrap();
        match sqrt_transform(&ds) {
            Err(Error::Domain {
                partition,
                row,
                column,
                ..
            }) => assert_eq!((partition, row, column), (1, 1, 0)),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn differences_of_identity() {
        let ds = ActivityDataset::new(vec![DMatrix::identity(2, 2)], None).unwrap();
        let c = build_contrast_matrix(2).unwrap();
        let diff = pattern_differences(&ds, &c).unwrap();
        assert_eq!(diff[0].as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn identical_rows_give_zero_difference() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 5.0, 0.0]);
        let ds = ActivityDataset::new(vec![b], None).unwrap();
        let c = build_contrast_matrix(3).unwrap();
        let diff = pattern_differences(&ds, &c).unwrap();
        assert_eq!(diff[0].row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn differences_match_double_loop() {
        let parts: Vec<_> = (0..3).map(|s| random_matrix(3, 4, s)).collect();
        let ds = ActivityDataset::new(parts.clone(), None).unwrap();
        let c = build_contrast_matrix(3).unwrap();
        let diff = pattern_differences(&ds, &c).unwrap();
        for (m, b) in parts.iter().enumerate() {
            let mut row = 0;
            for i in 0..3 {
                for j in (i + 1)..3 {
                    for col in 0..4 {
                        let expected = b[(i, col)] - b[(j, col)];
                        assert!((diff[m][(row, col)] - expected).abs() < 1e-15);
                    }
                    row += 1;
                }
            }
        }
    }

    #[test]
    fn differences_reject_wrong_k() {
        let ds = ActivityDataset::new(vec![DMatrix::zeros(3, 2)], None).unwrap();
        let c = build_contrast_matrix(4).unwrap();
        assert!(matches!(pattern_differences(&ds, &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dataset_rejects_nan_and_shape_mismatch() {
        let mut bad = DMatrix::zeros(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(ActivityDataset::new(vec![bad], None).is_err());
        assert!(ActivityDataset::new(vec![DMatrix::zeros(2, 2), DMatrix::zeros(3, 2)], None).is_err());
        let res = Some(vec![DMatrix::zeros(5, 3), DMatrix::zeros(5, 2)]);
        assert!(ActivityDataset::new(vec![DMatrix::zeros(2, 2); 2], res).is_err());
    }

    #[test]
    fn stacking_partition_pairs() {
        let parts: Vec<_> = (0..4).map(|s| random_matrix(2, 3, s)).collect();
        let ds = ActivityDataset::new(parts.clone(), None).unwrap();
        let stacked = ds.stack_partition_pairs().unwrap();
        assert_eq!((stacked.k(), stacked.m(), stacked.p()), (4, 2, 3));
        assert_eq!(stacked.patterns()[1].rows(0, 2), parts[2].rows(0, 2));
        assert_eq!(stacked.patterns()[1].rows(2, 2), parts[3].rows(0, 2));
        let odd = ActivityDataset::new(parts[..3].to_vec(), None).unwrap();
        assert!(odd.stack_partition_pairs().is_err());
    }

    #[test]
    fn load_reports_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_csv_matrix(&dir.path().join("a.csv"), &DMatrix::zeros(3, 2)).unwrap();
        write_csv_matrix(&dir.path().join("b.csv"), &DMatrix::zeros(3, 2)).unwrap();
        let manifest = dir.path().join("ds.json");
        fs::write(&manifest, r#"{"k":4,"p":2,"m":2,"partitions":["a.csv","b.csv"]}"#).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Ingestion { path, message, .. }) => {
                assert!(path.ends_with("a.csv"));
                assert!(message.contains("shape mismatch"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn load_reports_bad_residual_columns() {
        let dir = tempfile::tempdir().unwrap();
        write_csv_matrix(&dir.path().join("a.csv"), &DMatrix::zeros(3, 4)).unwrap();
        write_csv_matrix(&dir.path().join("b.csv"), &DMatrix::zeros(3, 4)).unwrap();
        write_csv_matrix(&dir.path().join("ra.csv"), &DMatrix::zeros(6, 4)).unwrap();
        write_csv_matrix(&dir.path().join("rb.csv"), &DMatrix::zeros(6, 3)).unwrap();
        let manifest = dir.path().join("ds.json");
        fs::write(
            &manifest,
            r#"{"k":3,"p":4,"m":2,"partitions":["a.csv","b.csv"],"residuals":["ra.csv","rb.csv"]}"#,
        )
        .unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn load_reports_non_numeric_cell_with_row() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2\n3,x\n").unwrap();
        fs::write(dir.path().join("b.csv"), "1,2\n3,4\n").unwrap();
        let manifest = dir.path().join("ds.json");
        fs::write(&manifest, r#"{"k":2,"p":2,"m":2,"partitions":["a.csv","b.csv"]}"#).unwrap();
        match load_dataset(&manifest) {
            Err(Error::Ingestion { row, path, .. }) => {
                assert_eq!(row, 2);
                assert!(path.ends_with("a.csv"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
        assert!(matches!(load_dataset(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn load_small_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ActivityDataset::new(vec![random_matrix(3, 4, 1), random_matrix(3, 4, 2)], None).unwrap();
        let manifest = dir.path().join("toy.json");
        write_dataset(&ds, &manifest).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!((back.k(), back.p(), back.m()), (3, 4, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_then_load_is_bit_exact(
            k in 2usize..5, p in 1usize..5, m in 1usize..4, with_res in any::<bool>(),
            seed in any::<u64>(), scale in -300i32..300,
        ) {
            let factor = 10f64.powi(scale);
            let patterns: Vec<_> = (0..m)
                .map(|i| random_matrix(k, p, seed.wrapping_add(i as u64)) * factor)
                .collect();
            let residuals = with_res.then(|| {
                (0..m).map(|i| random_matrix(k + 2, p, seed ^ (i as u64 + 99))).collect()
            });
            let ds = ActivityDataset::new(patterns, residuals).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let manifest = dir.path().join("ds.json");
            write_dataset(&ds, &manifest).unwrap();
            let back = load_dataset(&manifest).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
