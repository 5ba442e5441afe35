//! Feature/target tables: CSV ingestion, standardization, correlation
//! ranking and a seeded synthetic generator with known cluster structure.
//!
//! Identifiers are opaque strings and are never interpreted. The CSV layout
//! is `id,target,<feature names...>`, UTF-8, `.` as decimal separator.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

/// A feature matrix (`n x d`) with row identifiers and a real-valued target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: DMatrix<f64>,
    feature_names: Vec<String>,
    target: DVector<f64>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        features: DMatrix<f64>,
        feature_names: Vec<String>,
        target: DVector<f64>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Data("dataset has zero rows".into()));
        }
        if features.ncols() == 0 {
            return Err(Error::Data("dataset has zero feature columns".into()));
        }
        if features.nrows() != n || target.len() != n {
            return Err(Error::Data(format!(
                "row count mismatch: {} ids, {} feature rows, {} targets",
                n,
                features.nrows(),
                target.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Cell {
                    row: i + 1,
                    column: "id".into(),
                    message: "missing id".into(),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Cell {
                    row: i + 1,
                    column: "id".into(),
                    message: format!("duplicate id {id:?}"),
                });
            }
        }
        for j in 0..features.ncols() {
            for i in 0..n {
                if !features[(i, j)].is_finite() {
                    return Err(Error::Cell {
                        row: i + 1,
                        column: feature_names[j].clone(),
                        message: format!("non-finite value {}", features[(i, j)]),
                    });
                }
            }
        }
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Cell {
                row: i + 1,
                column: "target".into(),
                message: format!("non-finite value {}", target[i]),
            });
        }
        Ok(Self {
            ids,
            features,
            feature_names,
            target,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Rows `idx`, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select_rows(idx),
            feature_names: self.feature_names.clone(),
            target: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.target[i])),
        }
    }

    /// Keep only the named feature columns, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset> {
        let cols = names
            .iter()
            .map(|name| {
                self.feature_names
                    .iter()
                    .position(|f| f == name)
                    .ok_or_else(|| Error::Data(format!("unknown feature column {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            ids: self.ids.clone(),
            features: self.features.select_columns(&cols),
            feature_names: names.to_vec(),
            target: self.target.clone(),
        })
    }

    pub(crate) fn with_features(&self, features: DMatrix<f64>) -> Dataset {
        Dataset {
            ids: self.ids.clone(),
            features,
            feature_names: self.feature_names.clone(),
            target: self.target.clone(),
        }
    }
}

/// Column roles for [`load_dataset`]. Every column other than the id and
/// target columns is a feature, in header order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub id_column: String,
    pub target_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            target_column: "target".into(),
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("header has no column {name:?}")))
    };
    let id_col = find(&schema.id_column)?;
    let target_col = find(&schema.target_column)?;
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != id_col && c != target_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }

    let d = feature_cols.len();
    let mut ids = Vec::new();
    let mut target = Vec::new();
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::Cell {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let parse = |c: usize| -> Result<f64> {
            let raw = record[c].trim();
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row,
                column: header[c].clone(),
                message: format!("non-numeric value {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row,
                    column: header[c].clone(),
                    message: format!("non-finite value {raw:?}"),
                });
            }
            Ok(v)
        };
        ids.push(record[id_col].trim().to_string());
        target.push(parse(target_col)?);
        for &c in &feature_cols {
            values.push(parse(c)?);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::Data("dataset has zero rows".into()));
    }
    Dataset::new(
        ids,
        DMatrix::from_row_slice(n, d, &values),
        feature_cols.iter().map(|&c| header[c].clone()).collect(),
        DVector::from_vec(target),
    )
}

/// Write `id,target,<features...>`. Values use the shortest representation
/// that parses back to the identical `f64`.
pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(data, file)
}

pub fn write_dataset<W: std::io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "target".to_string()];
    header.extend(data.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n_rows() {
        let mut rec = Vec::with_capacity(data.n_features() + 2);
        rec.push(data.ids[i].clone());
        rec.push(data.target[i].to_string());
        rec.extend(data.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: Vec<f64>,
    /// Population standard deviations; 1.0 for constant columns.
    pub stddevs: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ScalerParams {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let mut means = Vec::with_capacity(x.ncols());
        let mut stddevs = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let v: Vec<f64> = col.iter().copied().collect();
            let is_const = v.iter().all(|&a| a == v[0]);
            let sd = stats::pop_std(&v);
            means.push(stats::mean(&v));
            if is_const || sd == 0.0 {
                stddevs.push(1.0);
                constant.push(true);
            } else {
                stddevs.push(sd);
                constant.push(false);
            }
        }
        Self {
            means,
            stddevs,
            constant,
        }
    }

    /// Pass-through scaler (mean 0, std 1) for hand-built models.
    pub fn identity(d: usize) -> Self {
        Self {
            means: vec![0.0; d],
            stddevs: vec![1.0; d],
            constant: vec![false; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.constant[j] {
                col.fill(0.0);
            } else {
                let (m, s) = (self.means[j], self.stddevs[j]);
                col.apply(|v| *v = (*v - m) / s);
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.ncols(),
            });
        }
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.stddevs[j]);
            col.apply(|v| *v = *v * s + m);
        }
        Ok(out)
    }
}

/// Standardize every feature column to mean 0 and population std 1.
/// Constant columns are zeroed and flagged in the returned parameters.
pub fn standardize(data: &Dataset) -> Result<(Dataset, ScalerParams)> {
    if data.n_rows() < 2 {
        return Err(Error::invalid("standardize needs at least 2 rows"));
    }
    let params = ScalerParams::fit(&data.features);
    let z = params.transform(&data.features)?;
    Ok((data.with_features(z), params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub feature: String,
    pub pearson_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRanking {
    pub entries: Vec<CorrelationEntry>,
    pub threshold: f64,
}

impl CorrelationRanking {
    pub fn feature_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.feature.clone()).collect()
    }
}

/// Features whose `|r(feature, target)|` strictly exceeds `threshold`,
/// ordered by `|r|` descending (header order on ties).
pub fn rank_correlated_features(data: &Dataset, threshold: f64) -> CorrelationRanking {
    let target: Vec<f64> = data.target.iter().copied().collect();
    let mut entries = Vec::new();
    for (j, col) in data.features.column_iter().enumerate() {
        let v: Vec<f64> = col.iter().copied().collect();
        if v.iter().all(|&a| a == v[0]) {
            log::warn!("skipping constant feature {:?} in correlation ranking", data.feature_names[j]);
            continue;
        }
        let Some(r) = stats::pearson(&v, &target) else {
            continue;
        };
        if r.abs() > threshold {
            entries.push(CorrelationEntry {
                feature: data.feature_names[j].clone(),
                pearson_r: r,
            });
        }
    }
    entries.sort_by(|a, b| b.pearson_r.abs().total_cmp(&a.pearson_r.abs()));
    CorrelationRanking { entries, threshold }
}

/// Parameters of the per-cluster affine response `y = w_k . x + b_k + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetModel {
    /// Standard deviation of each coefficient of `w_k`.
    pub coefficient_scale: f64,
    /// Standard deviation of the intercepts `b_k`.
    pub intercept_scale: f64,
}

impl Default for TargetModel {
    fn default() -> Self {
        Self {
            coefficient_scale: 1.0,
            intercept_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub dim: usize,
    /// Distance between cluster centers in units of the within-cluster std.
    pub separation: f64,
    pub target: TargetModel,
    /// Standard deviation of the additive target noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            points_per_cluster: 300,
            dim: 10,
            separation: 8.0,
            target: TargetModel::default(),
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Isotropic unit-variance Gaussian clusters. Centers sit at
/// `±(separation/√2)·e_i`, so every pair is at least `separation` apart;
/// this allows up to `2·dim` clusters.
///
/// Returns the dataset (rows grouped by cluster) and the true labels.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, Vec<i64>)> {
    if config.dim < 2 {
        return Err(Error::invalid(format!(
            "synthetic dimension must be at least 2, got {}",
            config.dim
        )));
    }
    if config.clusters == 0 || config.points_per_cluster == 0 {
        return Err(Error::invalid("cluster count and points per cluster must be positive"));
    }
    if config.clusters > 2 * config.dim {
        return Err(Error::invalid(format!(
            "at most {} clusters fit in dimension {}",
            2 * config.dim,
            config.dim
        )));
    }
    if !(config.separation >= 0.0) || !(config.noise >= 0.0) {
        return Err(Error::invalid("separation and noise must be non-negative"));
    }

    let d = config.dim;
    let n = config.clusters * config.points_per_cluster;
    let offset = config.separation / std::f64::consts::SQRT_2;
    let mut values = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    for k in 0..config.clusters {
        let mut coef_rng = rng::keyed_rng(config.seed, &[0, k as u64]);
        let w: Vec<f64> = (0..d)
            .map(|_| config.target.coefficient_scale * coef_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b = config.target.intercept_scale * coef_rng.sample::<f64, _>(StandardNormal);
        let mut center = vec![0.0; d];
        center[k % d] = if k < d { offset } else { -offset };

        let mut rng = rng::keyed_rng(config.seed, &[1, k as u64]);
        for _ in 0..config.points_per_cluster {
            let x: Vec<f64> = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps: f64 = rng.sample(StandardNormal);
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b + config.noise * eps;
            values.extend_from_slice(&x);
            target.push(y);
            labels.push(k as i64);
        }
    }

    let ids = (0..n).map(|i| format!("s{i:05}")).collect();
    let names = (0..d).map(|j| format!("f{}", j + 1)).collect();
    let data = Dataset::new(
        ids,
        DMatrix::from_row_slice(n, d, &values),
        names,
        DVector::from_vec(target),
    )?;
    Ok((data, labels))
}
