use nalgebra::{DMatrix, RowDVector};

use super::{Embedding, EmbeddingMethod, EmbeddingParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PcaResult {
    pub embedding: Embedding,
    /// `d x m`, orthonormal columns, ordered by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Population variance along each component (eigenvalues of the
    /// divide-by-n covariance matrix).
    pub explained_variance: Vec<f64>,
    pub mean: RowDVector<f64>,
}

/// Principal components by thin SVD of the centered data. Each basis vector
/// is sign-normalized so that its largest-magnitude entry is positive.
pub fn pca(x: &DMatrix<f64>, n_components: usize) -> Result<PcaResult> {
    let (n, d) = x.shape();
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::invalid(format!(
            "n_components must be in 1..={}, got {n_components}",
            n.min(d)
        )));
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut basis = DMatrix::zeros(d, n_components);
    let mut explained_variance = Vec::with_capacity(n_components);
    for (c, &k) in order.iter().take(n_components).enumerate() {
        let mut v = v_t.row(k).transpose();
        let pivot = v.iter().copied().fold(0.0f64, |acc, a| if a.abs() > acc.abs() { a } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
        let s = svd.singular_values[k];
        explained_variance.push(s * s / n as f64);
    }

    let coordinates = &centered * &basis;
    Ok(PcaResult {
        embedding: Embedding {
            coordinates,
            method: EmbeddingMethod::Pca,
            params: EmbeddingParams {
                components: n_components,
                perplexity: None,
                iterations: None,
                seed: None,
            },
            objective_trace: Vec::new(),
        },
        basis,
        explained_variance,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_data_has_one_component() {
        let x = DMatrix::from_fn(12, 3, |i, j| (i as f64 - 3.0) * [1.0, -2.0, 0.5][j]);
        let res = pca(&x, 1).unwrap();
        let total: f64 = (0..3)
            .map(|j| {
                let c = x.column(j);
                let m = c.mean();
                c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 12.0
            })
            .sum();
        assert!((res.explained_variance[0] - total).abs() < 1e-10 * total);
        let full = pca(&x, 3).unwrap();
        assert!(full.explained_variance[1].abs() < 1e-10);
        assert!(full.explained_variance[2].abs() < 1e-10);
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = DMatrix::from_fn(9, 4, |i, j| ((i * 7 + j * 3) as f64).sin() + j as f64);
        let res = pca(&x, 4).unwrap();
        let mut recon = &res.embedding.coordinates * res.basis.transpose();
        for mut row in recon.row_iter_mut() {
            row += &res.mean;
        }
        assert!((recon - &x).amax() < 1e-8);
        let gram = res.basis.transpose() * &res.basis;
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn rejects_too_many_components() {
        let x = DMatrix::from_element(3, 5, 1.0);
        assert!(pca(&x, 4).is_err());
        assert!(pca(&x, 0).is_err());
    }
}
