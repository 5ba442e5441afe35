//! k-nearest-neighbour applicability domain: distance-distribution
//! (rectified z-score of the mean kNN distance) and local-density scores.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Tanimoto distance on the sets of non-zero coordinates.
    Jaccard,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Jaccard => {
                let (mut inter, mut union) = (0usize, 0usize);
                for (x, y) in a.iter().zip(b) {
                    let (p, q) = (*x != 0.0, *y != 0.0);
                    inter += (p && q) as usize;
                    union += (p || q) as usize;
                }
                if union == 0 {
                    0.0
                } else {
                    1.0 - inter as f64 / union as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdModel {
    rows: Vec<Vec<f64>>,
    k: usize,
    metric: Metric,
    mu_knn: f64,
    sigma_knn: f64,
    train_mean_knn_dists: Vec<f64>,
}

/// Scores for one query. `ad_ld` is `+inf` when every neighbour's own
/// neighbourhood has zero radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdScore {
    pub ad_dd: f64,
    pub ad_ld: f64,
    pub novel: bool,
}

/// Indices and distances of the `k` nearest rows to `q`, skipping `exclude`.
/// Ties are broken by row index.
fn knn(rows: &[Vec<f64>], metric: Metric, q: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| (i, metric.distance(r, q)))
        .collect();
    let by = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    if k < d.len() {
        d.select_nth_unstable_by(k, by);
        d.truncate(k);
    }
    d.sort_by(by);
    d
}

fn matrix_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Fit on the training rows. Each training point's neighbours exclude itself.
pub fn fit_ad(train: &DMatrix<f64>, k: usize, metric: Metric) -> Result<AdModel> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if train.nrows() < k + 1 {
        return Err(Error::invalid(format!(
            "applicability domain with k = {k} needs at least {} training rows, got {}",
            k + 1,
            train.nrows()
        )));
    }
    let rows = matrix_rows(train);
    let means: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let nn = knn(&rows, metric, &rows[i], k, Some(i));
            nn.iter().map(|(_, d)| d).sum::<f64>() / k as f64
        })
        .collect();
    let mu = crate::stats::mean(&means);
    let sigma = crate::stats::pop_std(&means);
    if !(sigma > 0.0) {
        return Err(Error::Data(format!(
            "all training mean {k}-NN distances equal {mu}; the distance distribution is degenerate, use a larger k or add jitter to the features"
        )));
    }
    Ok(AdModel {
        rows,
        k,
        metric,
        mu_knn: mu,
        sigma_knn: sigma,
        train_mean_knn_dists: means,
    })
}

impl AdModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn mu_knn(&self) -> f64 {
        self.mu_knn
    }

    pub fn sigma_knn(&self) -> f64 {
        self.sigma_knn
    }

    pub fn train_mean_knn_dists(&self) -> &[f64] {
        &self.train_mean_knn_dists
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let d = self.rows[0].len();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn neighbours(&self, x: &[f64]) -> Vec<(usize, f64)> {
        knn(&self.rows, self.metric, x, self.k, None)
    }

    fn dd_from(&self, nn: &[(usize, f64)]) -> f64 {
        let mean = nn.iter().map(|(_, d)| d).sum::<f64>() / self.k as f64;
        ((mean - self.mu_knn) / self.sigma_knn).max(0.0)
    }

    fn ld_from(&self, nn: &[(usize, f64)]) -> f64 {
        let num = nn.iter().map(|(_, d)| d).sum::<f64>() / self.k as f64;
        let den = nn.iter().map(|(j, _)| self.train_mean_knn_dists[*j]).sum::<f64>() / self.k as f64;
        if den == 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    }

    /// `max(0, (mean kNN distance - mu) / sigma)`.
    pub fn ad_dd_score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.dd_from(&self.neighbours(x)))
    }

    /// Mean kNN distance of `x` relative to the mean kNN distance of those neighbours.
    pub fn ad_ld_score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.ld_from(&self.neighbours(x)))
    }

    /// Flag and threshold `z_{1-alpha}`.
    pub fn novelty_flag(&self, x: &[f64], alpha: f64) -> Result<(bool, f64)> {
        let z = threshold(alpha)?;
        Ok((self.ad_dd_score(x)? > z, z))
    }

    /// Both scores plus the novelty flag for every query row.
    pub fn score_all(&self, queries: &DMatrix<f64>, alpha: f64) -> Result<Vec<AdScore>> {
        let z = threshold(alpha)?;
        let rows = matrix_rows(queries);
        if let Some(r) = rows.first() {
            self.check_dim(r)?;
        }
        Ok(rows
            .par_iter()
            .map(|q| {
                let nn = self.neighbours(q);
                let ad_dd = self.dd_from(&nn);
                AdScore {
                    ad_dd,
                    ad_ld: self.ld_from(&nn),
                    novel: ad_dd > z,
                }
            })
            .collect())
    }
}

fn threshold(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(normal_quantile(1.0 - alpha))
}
