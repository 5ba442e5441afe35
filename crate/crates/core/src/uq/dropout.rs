use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{UqEstimate, UqSource};
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McDropoutConfig {
    pub passes: usize,
    pub seed: u64,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        Self { passes: 100, seed: 0 }
    }
}

/// `T` stochastic forward passes; pass `t` draws its masks from
/// `derive_seed(seed, [t])`. Returns the sample mean and the population
/// standard deviation across passes for every row.
pub fn mc_dropout(model: &MlpModel, features: &DMatrix<f64>, config: &McDropoutConfig) -> Result<Vec<UqEstimate>> {
    if config.passes == 0 {
        return Err(Error::invalid("MC dropout needs at least one pass"));
    }
    let passes: Vec<Vec<f64>> = (0..config.passes)
        .into_par_iter()
        .map(|t| {
            model
                .predict(features, true, derive_seed(config.seed, &[t as u64]))
                .map(|v| v.as_slice().to_vec())
        })
        .collect::<Result<_>>()?;
    let n = features.nrows();
    let t = config.passes as f64;
    Ok((0..n)
        .map(|i| {
            let mean = passes.iter().map(|p| p[i]).sum::<f64>() / t;
            let var = passes.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / t;
            UqEstimate {
                point_mean: mean,
                uncertainty: var.sqrt(),
                residual_mean: None,
                source: UqSource::Dropout,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ScalerParams;
    use crate::mlp::Layer;
    use nalgebra::DVector;

    fn tiny(p: f64) -> MlpModel {
        let layers = vec![
            Layer::new(DMatrix::from_element(1, 2, 1.0), DVector::zeros(2)).unwrap(),
            Layer::new(DMatrix::from_element(2, 1, 1.0), DVector::zeros(1)).unwrap(),
        ];
        MlpModel::from_layers(layers, p, ScalerParams::identity(1)).unwrap()
    }

    #[test]
    fn no_dropout_collapses_to_point_prediction() {
        let m = tiny(0.0);
        let x = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let est = mc_dropout(&m, &x, &McDropoutConfig { passes: 20, seed: 4 }).unwrap();
        let det = m.predict(&x, false, 0).unwrap();
        for (e, d) in est.iter().zip(det.iter()) {
            assert_eq!(e.point_mean, *d);
            assert_eq!(e.uncertainty, 0.0);
        }
    }

    #[test]
    fn single_pass_has_zero_spread() {
        let est = mc_dropout(&tiny(0.5), &DMatrix::from_element(1, 1, 1.0), &McDropoutConfig { passes: 1, seed: 0 }).unwrap();
        assert_eq!(est[0].uncertainty, 0.0);
        assert!([0.0, 2.0, 4.0].contains(&est[0].point_mean));
    }

    #[test]
    fn pass_outputs_come_from_the_mask_support() {
        let m = tiny(0.5);
        let x = DMatrix::from_element(1, 1, 1.0);
        for s in 0..50 {
            let y = m.predict(&x, true, s).unwrap()[0];
            assert!([0.0, 2.0, 4.0].contains(&y), "{y}");
        }
    }
}
