//! Density clustering of an embedding and cluster-held-out splits.
//!
//! A split trains on a sample of one cluster and tests on every other
//! eligible cluster. Noise points never enter any split.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Dbscan,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabels {
    /// One entry per dataset row; [`NOISE`] or a cluster id in `0..k`.
    pub labels: Vec<i64>,
    pub k: usize,
    pub source: LabelSource,
}

impl ClusterLabels {
    /// Validate that the non-noise labels are exactly `0..k` with no gaps.
    pub fn new(labels: Vec<i64>, source: LabelSource) -> Result<Self> {
        let present: BTreeSet<i64> = labels.iter().copied().filter(|&l| l != NOISE).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l < NOISE) {
            return Err(Error::Data(format!("invalid cluster label {bad}")));
        }
        let k = present.len();
        if present.iter().copied().ne(0..k as i64) {
            return Err(Error::Data(format!(
                "cluster labels must be contiguous from 0, found {present:?}"
            )));
        }
        Ok(Self { labels, k, source })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, cluster: i64) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            if l != NOISE {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// DBSCAN with `dist <= eps` neighborhoods (a point is its own neighbor).
///
/// Points are scanned in row order and each cluster is fully expanded before
/// the next one starts, so cluster ids follow the index of their first core
/// point and a border point reachable from several clusters belongs to the
/// lowest-numbered one.
pub fn dbscan(points: &DMatrix<f64>, eps: f64, min_pts: usize) -> Result<ClusterLabels> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::invalid("min_pts must be positive"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("DBSCAN input contains non-finite coordinates"));
    }
    let neighbors = neighborhoods(points, eps);
    let n = points.nrows();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut assigned = vec![false; n];
    let mut next = 0i64;
    for start in 0..n {
        if assigned[start] || !core[start] {
            continue;
        }
        let cluster = next;
        next += 1;
        let mut queue = VecDeque::from([start]);
        assigned[start] = true;
        labels[start] = cluster;
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if !assigned[q] {
                    assigned[q] = true;
                    labels[q] = cluster;
                    queue.push_back(q);
                }
            }
        }
    }
    ClusterLabels::new(labels, LabelSource::Dbscan)
}

/// Sorted ε-neighborhoods, including the point itself.
fn neighborhoods(points: &DMatrix<f64>, eps: f64) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let d = points.ncols();
    let rows: Vec<f64> = (0..n).flat_map(|i| points.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let eps2 = eps * eps;
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        let xi = &rows[i * d..(i + 1) * d];
        for j in 0..n {
            let xj = &rows[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            if s <= eps2 {
                out[i].push(j);
            }
        }
    }
    out
}

/// Disjoint row-index sets for one cluster-held-out experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub train_cluster: i64,
    pub seed: u64,
}

impl SplitSpec {
    /// Rows of the training cluster that are neither train nor valid.
    pub fn holdout_idx(&self, labels: &ClusterLabels) -> Vec<usize> {
        let used: BTreeSet<usize> = self.train_idx.iter().chain(&self.valid_idx).copied().collect();
        labels
            .members(self.train_cluster)
            .into_iter()
            .filter(|i| !used.contains(i))
            .collect()
    }
}

/// One split per cluster with at least `min_cluster_size` members.
///
/// Train and validation rows are sampled without replacement. The sampling
/// stream is keyed by the cluster's lowest row index rather than its label,
/// so relabeling clusters leaves every split unchanged.
pub fn make_cluster_splits(
    data: &Dataset,
    labels: &ClusterLabels,
    train_n: usize,
    valid_n: usize,
    min_cluster_size: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    if labels.len() != data.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: data.n_rows(),
            got: labels.len(),
        });
    }
    if train_n == 0 {
        return Err(Error::invalid("train_n must be positive"));
    }
    let eligible: Vec<(i64, Vec<usize>)> = (0..labels.k as i64)
        .map(|c| (c, labels.members(c)))
        .filter(|(_, rows)| rows.len() >= min_cluster_size && !rows.is_empty())
        .collect();

    let mut splits = Vec::with_capacity(eligible.len());
    for (cluster, rows) in &eligible {
        if rows.len() < train_n + valid_n {
            return Err(Error::Data(format!(
                "cluster {cluster} has {} rows, fewer than train_n + valid_n = {}",
                rows.len(),
                train_n + valid_n
            )));
        }
        let mut shuffled = rows.clone();
        let mut rng = rng::keyed_rng(seed, &[rows[0] as u64]);
        shuffled.shuffle(&mut rng);
        let mut train_idx = shuffled[..train_n].to_vec();
        let mut valid_idx = shuffled[train_n..train_n + valid_n].to_vec();
        train_idx.sort_unstable();
        valid_idx.sort_unstable();
        let mut test_idx: Vec<usize> = eligible
            .iter()
            .filter(|(c, _)| c != cluster)
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        test_idx.sort_unstable();
        splits.push(SplitSpec {
            train_idx,
            valid_idx,
            test_idx,
            train_cluster: *cluster,
            seed,
        });
    }
    Ok(splits)
}

/// Read `id,cluster` and align it to the dataset's row order.
pub fn load_external_labels(path: impl AsRef<Path>, data: &Dataset) -> Result<ClusterLabels> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_external_labels(file, data)
}

pub fn read_external_labels<R: std::io::Read>(reader: R, data: &Dataset) -> Result<ClusterLabels> {
    let row_of: HashMap<&str, usize> = data.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut labels: Vec<Option<i64>> = vec![None; data.n_rows()];
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != ["id", "cluster"] {
        return Err(Error::Data(format!("labels header must be id,cluster, found {header:?}")));
    }
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec[0].trim();
        let row = *row_of
            .get(id)
            .ok_or_else(|| Error::Data(format!("labels file: unknown id {id:?}")))?;
        let raw = rec[1].trim();
        let label: i64 = raw.parse().map_err(|_| Error::Cell {
            row: i + 1,
            column: "cluster".into(),
            message: format!("non-integer label {raw:?}"),
        })?;
        if labels[row].replace(label).is_some() {
            return Err(Error::Data(format!("labels file: id {id:?} appears more than once")));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::Data(format!("labels file: missing id {:?}", data.ids()[i]))))
        .collect::<Result<Vec<_>>>()?;
    ClusterLabels::new(labels, LabelSource::External)
}

pub fn write_labels_csv(path: impl AsRef<Path>, ids: &[String], labels: &[i64]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "cluster"])?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), &l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

impl SplitRole {
    fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Valid => "valid",
            SplitRole::Test => "test",
        }
    }
}

/// Write `id,role` in dataset row order; rows outside the split are omitted.
pub fn write_split_csv(path: impl AsRef<Path>, ids: &[String], split: &SplitSpec) -> Result<()> {
    let path = path.as_ref();
    let mut roles: BTreeMap<usize, SplitRole> = BTreeMap::new();
    roles.extend(split.train_idx.iter().map(|&i| (i, SplitRole::Train)));
    roles.extend(split.valid_idx.iter().map(|&i| (i, SplitRole::Valid)));
    roles.extend(split.test_idx.iter().map(|&i| (i, SplitRole::Test)));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "role"])?;
    for (i, role) in roles {
        w.write_record([ids[i].as_str(), role.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a split file back. The training cluster is taken from `labels`.
pub fn load_split_csv(path: impl AsRef<Path>, data: &Dataset, labels: &ClusterLabels, seed: u64) -> Result<SplitSpec> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let row_of: HashMap<&str, usize> = data.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut rdr = csv::Reader::from_reader(file);
    let (mut train_idx, mut valid_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec[0].trim();
        let row = *row_of
            .get(id)
            .ok_or_else(|| Error::Data(format!("{}: unknown id {id:?}", path.display())))?;
        match rec[1].trim() {
            "train" => train_idx.push(row),
            "valid" => valid_idx.push(row),
            "test" => test_idx.push(row),
            other => return Err(Error::Data(format!("{}: unknown role {other:?}", path.display()))),
        }
    }
    train_idx.sort_unstable();
    valid_idx.sort_unstable();
    test_idx.sort_unstable();
    let first = *train_idx
        .first()
        .ok_or_else(|| Error::Data(format!("{}: split has no training rows", path.display())))?;
    Ok(SplitSpec {
        train_idx,
        valid_idx,
        test_idx,
        train_cluster: labels.labels[first],
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            DMatrix::from_fn(n, 1, |i, _| i as f64),
            vec!["x".into()],
            DVector::from_fn(n, |i, _| i as f64),
        )
        .unwrap()
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = DMatrix::from_element(6, 2, 3.0);
        let l = dbscan(&pts, 0.1, 6).unwrap();
        assert_eq!(l.k, 1);
        assert!(l.labels.iter().all(|&v| v == 0));
        let l = dbscan(&pts, 0.1, 7).unwrap();
        assert_eq!(l.k, 0);
        assert!(l.labels.iter().all(|&v| v == NOISE));
    }

    #[test]
    fn isolated_point_is_noise() {
        let pts = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.1, 0.0, 0.0, 0.1, 5.0, 5.0]);
        let l = dbscan(&pts, 0.5, 2).unwrap();
        assert_eq!(l.labels, vec![0, 0, 0, NOISE]);
    }

    #[test]
    fn border_point_goes_to_lowest_cluster() {
        // Two dense groups on a line; point 3 is a border point of both.
        let xs = [0.0, 0.1, 0.2, 0.3, 1.0, 1.7, 1.8, 1.9, 2.0];
        let pts = DMatrix::from_fn(9, 1, |i, _| xs[i]);
        let l = dbscan(&pts, 0.75, 4).unwrap();
        assert_eq!(l.k, 2);
        assert_eq!(l.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn paper_shaped_cluster_sizes() {
        let sizes = [2132usize, 2455, 3252, 1154, 7];
        let mut labels = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat(c as i64).take(s));
        }
        let n = labels.len();
        let data = dataset(n);
        let labels = ClusterLabels::new(labels, LabelSource::External).unwrap();
        let splits = make_cluster_splits(&data, &labels, 1000, 100, 100, 4).unwrap();
        assert_eq!(splits.len(), 4);
        for (c, s) in splits.iter().enumerate() {
            assert_eq!(s.train_cluster, c as i64);
            assert_eq!(s.train_idx.len(), 1000);
            assert_eq!(s.valid_idx.len(), 100);
            let others: usize = sizes[..4].iter().enumerate().filter(|&(k, _)| k != c).map(|(_, s)| s).sum();
            assert_eq!(s.test_idx.len(), others);
            assert!(s.test_idx.iter().all(|&i| labels.labels[i] != 4));
            assert_eq!(s.holdout_idx(&labels).len(), sizes[c] - 1100);
        }
    }

    #[test]
    fn exact_size_cluster_and_too_small_cluster() {
        let labels = ClusterLabels::new(vec![0, 0, 0, 1, 1, 1, 1, 1], LabelSource::External).unwrap();
        let data = dataset(8);
        let splits = make_cluster_splits(&data, &labels, 2, 1, 3, 0).unwrap();
        assert_eq!(splits.len(), 2);
        assert!(splits[0].holdout_idx(&labels).is_empty());
        assert_eq!(splits[0].test_idx, vec![3, 4, 5, 6, 7]);
        // cluster 0 is eligible but cannot supply 3 + 1 rows
        assert!(make_cluster_splits(&data, &labels, 3, 1, 3, 0).is_err());
        // ... unless it is excluded by the size floor
        assert_eq!(make_cluster_splits(&data, &labels, 3, 1, 4, 0).unwrap().len(), 1);
    }

    #[test]
    fn labels_must_be_contiguous() {
        assert!(ClusterLabels::new(vec![0, 2], LabelSource::External).is_err());
        assert!(ClusterLabels::new(vec![0, -2], LabelSource::External).is_err());
        assert_eq!(ClusterLabels::new(vec![0, 1, 1, 0], LabelSource::External).unwrap().k, 2);
    }

    #[test]
    fn external_labels_align_to_dataset_order() {
        let data = dataset(4);
        let sorted = read_external_labels("id,cluster\nr0,0\nr1,1\nr2,1\nr3,0\n".as_bytes(), &data).unwrap();
        let permuted = read_external_labels("id,cluster\nr2,1\nr0,0\nr3,0\nr1,1\n".as_bytes(), &data).unwrap();
        assert_eq!(sorted, permuted);
        assert_eq!(sorted.k, 2);
        assert_eq!(sorted.labels, vec![0, 1, 1, 0]);

        let missing = read_external_labels("id,cluster\nr0,0\nr1,1\nr2,1\n".as_bytes(), &data).unwrap_err();
        assert!(missing.to_string().contains("r3"));
        let unknown = read_external_labels("id,cluster\nr0,0\nr1,1\nr2,1\nr3,0\nzz,0\n".as_bytes(), &data).unwrap_err();
        assert!(unknown.to_string().contains("zz"));
    }
}
