//! Dimensionality reduction for split design: PCA followed by exact t-SNE.

mod pca;
mod tsne;

use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pca::{pca, PcaResult};
pub use tsne::{joint_probabilities, kl_divergence_and_gradient, perplexity_bandwidths, tsne, TsneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMethod {
    Pca,
    Tsne,
}

/// Settings that produced an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub components: usize,
    pub perplexity: Option<f64>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coordinates: DMatrix<f64>,
    pub method: EmbeddingMethod,
    pub params: EmbeddingParams,
    /// KL divergence per iteration (t-SNE only); entry 0 is the initial layout.
    pub objective_trace: Vec<f64>,
}

/// Write `id,dim1,dim2[,...]`.
pub fn write_embedding_csv(path: impl AsRef<Path>, ids: &[String], emb: &Embedding) -> Result<()> {
    let path = path.as_ref();
    let coords = &emb.coordinates;
    if ids.len() != coords.nrows() {
        return Err(Error::DimensionMismatch {
            expected: coords.nrows(),
            got: ids.len(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["id".to_string()];
    header.extend((1..=coords.ncols()).map(|j| format!("dim{j}")));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(coords.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write `iter,kl`.
pub fn write_kl_trace_csv(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iter", "kl"])?;
    for (i, kl) in trace.iter().enumerate() {
        w.write_record([i.to_string(), kl.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
