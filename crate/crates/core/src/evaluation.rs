//! R², cross-cluster performance tables, uncertainty-ranked removal curves
//! and box-plot summaries.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterLabels, SplitSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::stats::{normal_quantile, quantile_sorted};

/// Coefficient of determination `1 - SSE/SST`. Negative values are returned as-is.
pub fn r_squared(actual: &DVector<f64>, predicted: &DVector<f64>) -> Result<f64> {
    r_squared_slices(actual.as_slice(), predicted.as_slice())
}

pub fn r_squared_slices(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if actual.len() < 2 {
        return Err(Error::invalid(format!("R² needs at least 2 points, got {}", actual.len())));
    }
    let mean = crate::stats::mean(actual);
    let sst: f64 = actual.iter().map(|y| (y - mean) * (y - mean)).sum();
    if sst == 0.0 {
        return Err(Error::Data("R² undefined: actual values are constant".into()));
    }
    let sse: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - sse / sst)
}

/// Anything that maps a feature matrix to one prediction per row.
pub trait Regressor {
    fn predict_rows(&self, features: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl Regressor for MlpModel {
    fn predict_rows(&self, features: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict(features, false, 0)
    }
}

impl<F> Regressor for F
where
    F: Fn(&DMatrix<f64>) -> DVector<f64>,
{
    fn predict_rows(&self, features: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self(features))
    }
}

/// Row `i` is the model trained on `clusters[i]`; column `j` is evaluated on
/// cluster `clusters[j]`. Absent entries (too few rows, constant target)
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Matrix {
    pub clusters: Vec<i64>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl R2Matrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j]
    }

    pub fn size(&self) -> usize {
        self.clusters.len()
    }

    /// Mean of the present off-diagonal entries in row `i`.
    pub fn mean_cross(&self, i: usize) -> Option<f64> {
        let vals: Vec<f64> = (0..self.size()).filter(|&j| j != i).filter_map(|j| self.get(i, j)).collect();
        (!vals.is_empty()).then(|| crate::stats::mean(&vals))
    }
}

/// Rows used to score cluster `j` by the model of split `i`: the held-out
/// rows of the training cluster on the diagonal, every row of `j` elsewhere.
pub fn evaluation_rows(splits: &[SplitSpec], labels: &ClusterLabels, i: usize, j: usize) -> Vec<usize> {
    if i == j {
        splits[i].holdout_idx(labels)
    } else {
        labels.members(splits[j].train_cluster)
    }
}

pub fn cross_cluster_table<R: Regressor>(
    models: &[R],
    data: &Dataset,
    labels: &ClusterLabels,
    splits: &[SplitSpec],
) -> Result<R2Matrix> {
    if models.len() != splits.len() {
        return Err(Error::DimensionMismatch {
            expected: splits.len(),
            got: models.len(),
        });
    }
    let k = splits.len();
    let mut entries = vec![vec![None; k]; k];
    for (i, model) in models.iter().enumerate() {
        for (j, entry) in entries[i].iter_mut().enumerate() {
            let rows = evaluation_rows(splits, labels, i, j);
            if rows.len() < 2 {
                continue;
            }
            let x = data.features().select_rows(&rows);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| data.target()[r]));
            let pred = model.predict_rows(&x)?;
            *entry = r_squared(&y, &pred).ok();
        }
    }
    Ok(R2Matrix {
        clusters: splits.iter().map(|s| s.train_cluster).collect(),
        entries,
    })
}

/// `r2_matrix.csv`: `train_cluster,cluster_<c>...`; absent entries are empty.
pub fn write_r2_matrix_csv(path: impl AsRef<Path>, m: &R2Matrix) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["train_cluster".to_string()];
    header.extend(m.clusters.iter().map(|c| format!("cluster_{c}")));
    w.write_record(&header)?;
    for (i, row) in m.entries.iter().enumerate() {
        let mut rec = vec![m.clusters[i].to_string()];
        rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_r2_matrix_csv(path: impl AsRef<Path>) -> Result<R2Matrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut clusters = Vec::new();
    let mut entries = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |col: usize, s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Cell {
                row: row + 1,
                column: col.to_string(),
                message: format!("not a number: {s:?}"),
            })
        };
        clusters.push(parse(0, &rec[0])? as i64);
        let vals = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, s)| if s.is_empty() { Ok(None) } else { parse(c, s).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        entries.push(vals);
    }
    Ok(R2Matrix { clusters, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalPoint {
    pub fraction_removed: f64,
    pub r2: f64,
    pub n_remaining: usize,
}

/// Repeatedly drop the `ceil(step_fraction * n0)` most uncertain remaining
/// points (ties by ascending row index) and score the remainder. The curve
/// starts with the full set and stops before the remainder falls below
/// `max(min_remaining, 2)`.
pub fn removal_curve(
    uncertainty: &[f64],
    actual: &[f64],
    predicted: &[f64],
    step_fraction: f64,
    min_remaining: usize,
) -> Result<Vec<RemovalPoint>> {
    let n0 = uncertainty.len();
    if actual.len() != n0 || predicted.len() != n0 {
        return Err(Error::DimensionMismatch {
            expected: n0,
            got: if actual.len() != n0 { actual.len() } else { predicted.len() },
        });
    }
    if !(step_fraction > 0.0 && step_fraction < 1.0) {
        return Err(Error::invalid(format!("step fraction must be in (0, 1), got {step_fraction}")));
    }
    if uncertainty.iter().any(|u| u.is_nan()) {
        return Err(Error::Data("uncertainty contains NaN".into()));
    }
    let mut order: Vec<usize> = (0..n0).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    let step = ((step_fraction * n0 as f64).ceil() as usize).max(1);
    let floor = min_remaining.max(2);

    let score = |kept: &[usize]| {
        let y: Vec<f64> = kept.iter().map(|&i| actual[i]).collect();
        let p: Vec<f64> = kept.iter().map(|&i| predicted[i]).collect();
        r_squared_slices(&y, &p)
    };
    let mut curve = vec![RemovalPoint {
        fraction_removed: 0.0,
        r2: score(&order)?,
        n_remaining: n0,
    }];
    let mut removed = step;
    while removed <= n0 && n0 - removed >= floor {
        let mut kept = order[removed..].to_vec();
        kept.sort_unstable();
        curve.push(RemovalPoint {
            fraction_removed: removed as f64 / n0 as f64,
            r2: score(&kept)?,
            n_remaining: n0 - removed,
        });
        removed += step;
    }
    Ok(curve)
}

pub fn write_removal_curve_csv(path: impl AsRef<Path>, curve: &[RemovalPoint]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["fraction_removed", "r2", "n_remaining"])?;
    for p in curve {
        w.write_record([p.fraction_removed.to_string(), p.r2.to_string(), p.n_remaining.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_removal_curve_csv(path: impl AsRef<Path>) -> Result<Vec<RemovalPoint>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Tukey box-plot summary. Quartiles use linear interpolation; whiskers are
/// the most extreme values within 1.5 IQR of the box. Infinite scores are
/// excluded from the quantiles and counted separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub method: String,
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: usize,
    pub n_infinite: usize,
}

pub fn boxplot_stats(method: &str, values: &[f64]) -> Result<BoxplotStats> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Data(format!("{method}: scores contain NaN")));
    }
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Data(format!("{method}: no finite scores")));
    }
    finite.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&finite, 0.25);
    let median = quantile_sorted(&finite, 0.5);
    let q3 = quantile_sorted(&finite, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || finite.iter().copied().filter(|&v| v >= lo && v <= hi);
    Ok(BoxplotStats {
        method: method.to_string(),
        n: values.len(),
        q1,
        median,
        q3,
        lower_whisker: inside().fold(f64::INFINITY, f64::min),
        upper_whisker: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: finite.len() - inside().count(),
        n_infinite: values.len() - finite.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqSummary {
    /// One entry per method followed by `actual_error`.
    pub stats: Vec<BoxplotStats>,
    /// Signed `y - yhat` per point.
    pub actual_error: Vec<f64>,
}

pub fn uq_summary_stats(methods: &[(String, Vec<f64>)], actual: &[f64], predicted: &[f64]) -> Result<UqSummary> {
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    let mut stats = Vec::with_capacity(methods.len() + 1);
    for (name, scores) in methods {
        if scores.len() != actual.len() {
            return Err(Error::DimensionMismatch {
                expected: actual.len(),
                got: scores.len(),
            });
        }
        stats.push(boxplot_stats(name, scores)?);
    }
    let actual_error: Vec<f64> = actual.iter().zip(predicted).map(|(y, p)| y - p).collect();
    stats.push(boxplot_stats("actual_error", &actual_error)?);
    Ok(UqSummary { stats, actual_error })
}

pub fn write_boxplot_csv(path: impl AsRef<Path>, rows: &[(String, BoxplotStats)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "split",
        "method",
        "n",
        "q1",
        "median",
        "q3",
        "lower_whisker",
        "upper_whisker",
        "outliers",
        "n_infinite",
    ])?;
    for (split, s) in rows {
        w.write_record([
            split.clone(),
            s.method.clone(),
            s.n.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.lower_whisker.to_string(),
            s.upper_whisker.to_string(),
            s.outliers.to_string(),
            s.n_infinite.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Fraction of in-cluster and out-of-cluster scores above `z_{1-alpha}`;
/// `None` for an empty group.
pub fn novelty_separation(scores: &[f64], in_cluster: &[bool], alpha: f64) -> Result<(Option<f64>, Option<f64>)> {
    if scores.len() != in_cluster.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: in_cluster.len(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let z = normal_quantile(1.0 - alpha);
    let rate = |want: bool| {
        let group: Vec<f64> = scores.iter().zip(in_cluster).filter(|(_, &f)| f == want).map(|(&s, _)| s).collect();
        (!group.is_empty()).then(|| group.iter().filter(|&&s| s > z).count() as f64 / group.len() as f64)
    };
    Ok((rate(true), rate(false)))
}
