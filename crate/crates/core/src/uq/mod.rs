//! Uncertainty estimators: Monte-Carlo dropout, applicability-domain
//! scores and GP residual modelling (RIO).

mod ad;
mod dropout;
mod rio;

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ad::{fit_ad, AdModel, AdScore, Metric};
pub use dropout::{mc_dropout, McDropoutConfig};
pub use rio::{
    composite_kernel, fit_rio, kernel_matrix, log_marginal_likelihood, rio_predict, KernelConfig, Lml, RioModel,
    RioSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqSource {
    Dropout,
    AdDd,
    AdLd,
    Rio,
}

impl UqSource {
    pub fn name(self) -> &'static str {
        match self {
            UqSource::Dropout => "dropout",
            UqSource::AdDd => "ad_dd",
            UqSource::AdLd => "ad_ld",
            UqSource::Rio => "rio",
        }
    }
}

/// Per-point estimate. `uncertainty` is never negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UqEstimate {
    pub point_mean: f64,
    pub uncertainty: f64,
    pub residual_mean: Option<f64>,
    pub source: UqSource,
}

fn check_ids(ids: &[String], n: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::DimensionMismatch {
            expected: ids.len(),
            got: n,
        });
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// `uq_dropout.csv`: `id,pred_mean,pred_std`.
pub fn write_dropout_csv(path: impl AsRef<Path>, ids: &[String], est: &[UqEstimate]) -> Result<()> {
    let path = path.as_ref();
    check_ids(ids, est.len())?;
    let mut w = writer(path)?;
    w.write_record(["id", "pred_mean", "pred_std"])?;
    for (id, e) in ids.iter().zip(est) {
        w.write_record([id.clone(), e.point_mean.to_string(), e.uncertainty.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `uq_ad.csv`: `id,ad_dd,ad_ld,novel_at_alpha`. An infinite local-density
/// score is written as `inf`.
pub fn write_ad_csv(path: impl AsRef<Path>, ids: &[String], scores: &[AdScore]) -> Result<()> {
    let path = path.as_ref();
    check_ids(ids, scores.len())?;
    let mut w = writer(path)?;
    w.write_record(["id", "ad_dd", "ad_ld", "novel_at_alpha"])?;
    for (id, s) in ids.iter().zip(scores) {
        w.write_record([id.clone(), s.ad_dd.to_string(), s.ad_ld.to_string(), s.novel.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `uq_rio.csv`: `id,yhat,residual_mean,residual_std,corrected_pred`.
pub fn write_rio_csv(path: impl AsRef<Path>, ids: &[String], yhat: &[f64], est: &[UqEstimate]) -> Result<()> {
    let path = path.as_ref();
    check_ids(ids, est.len())?;
    check_ids(ids, yhat.len())?;
    let mut w = writer(path)?;
    w.write_record(["id", "yhat", "residual_mean", "residual_std", "corrected_pred"])?;
    for ((id, y), e) in ids.iter().zip(yhat).zip(est) {
        w.write_record([
            id.clone(),
            y.to_string(),
            e.residual_mean.unwrap_or(0.0).to_string(),
            e.uncertainty.to_string(),
            e.point_mean.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
