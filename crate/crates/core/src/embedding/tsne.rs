//! Exact (O(n²)) t-SNE.
//!
//! Conditional affinities use a per-point Gaussian bandwidth found by
//! bisection on the precision so that each row's Shannon entropy matches
//! `log2(perplexity)`. The joint distribution is the symmetrized
//! `P = (P_{j|i} + P_{i|j}) / 2n`. The layout is optimized with momentum
//! gradient descent, adaptive per-coordinate gains and early exaggeration.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingMethod, EmbeddingParams};
use crate::error::{Error, Result};
use crate::rng;

const ENTROPY_TOL_BITS: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    /// `None` means `n / 12`.
    pub learning_rate: Option<f64>,
    pub init_std: f64,
    pub output_dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            learning_rate: None,
            init_std: 1e-4,
            output_dims: 2,
            seed: 0,
        }
    }
}

fn squared_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let d = x.ncols();
    // row-major copy for cache-friendly access
    let rows: Vec<f64> = (0..n).flat_map(|i| x.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let xi = &rows[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let xj = &rows[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

/// Fill `row` with `P_{j|i}` for precision `beta`; returns the entropy in bits.
fn conditional_row(dist_row: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let min = dist_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (p, &dj)) in row.iter_mut().zip(dist_row).enumerate() {
        *p = if j == i { 0.0 } else { (-beta * (dj - min)).exp() };
        sum += *p;
    }
    let mut weighted = 0.0;
    for (p, &dj) in row.iter_mut().zip(dist_row) {
        *p /= sum;
        weighted += *p * (dj - min);
    }
    // H = log Z + beta * E[d] (nats), with distances shifted by `min`.
    (sum.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Conditional affinities `P_{j|i}` (row-major `n x n`) and the Gaussian
/// bandwidths `sigma_i` chosen by entropy matching.
pub fn perplexity_bandwidths(x: &DMatrix<f64>, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.nrows();
    check_perplexity(n, perplexity)?;
    let dist = squared_distances(x);
    Ok(conditional_affinities(&dist, n, perplexity))
}

fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut sigmas = vec![0.0; n];
    for i in 0..n {
        let dist_row = &dist[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let mut beta: f64 = 1.0;
        let (mut lo, mut hi): (f64, f64) = (0.0, f64::INFINITY);
        let mut converged = false;
        for _ in 0..MAX_BISECTION_STEPS {
            let h = conditional_row(dist_row, i, beta, row);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL_BITS {
                converged = true;
                break;
            }
            if diff > 0.0 {
                // too flat: sharpen
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        if !converged {
            conditional_row(dist_row, i, beta, row);
            log::warn!("t-SNE bandwidth search for row {i} did not reach the entropy tolerance");
        }
        sigmas[i] = (0.5 / beta).sqrt();
    }
    (p, sigmas)
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if !(perplexity > 1.0) {
        return Err(Error::invalid(format!("perplexity must exceed 1, got {perplexity}")));
    }
    if (n as f64) <= 3.0 * perplexity {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} infeasible for {n} points (need n > 3*perplexity)"
        )));
    }
    Ok(())
}

/// Symmetric joint affinities `P` (sums to 1, zero diagonal) and bandwidths.
pub fn joint_probabilities(x: &DMatrix<f64>, perplexity: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = x.nrows();
    let (cond, sigmas) = perplexity_bandwidths(x, perplexity)?;
    let p = symmetrize(&cond, n);
    Ok((DMatrix::from_row_slice(n, n, &p), sigmas))
}

fn symmetrize(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
        }
    }
    p
}

/// Workspace for the KL objective; all buffers are row-major.
struct KlState {
    n: usize,
    dims: usize,
    /// Student-t kernel `1 / (1 + |y_i - y_j|^2)`.
    w: Vec<f64>,
}

impl KlState {
    fn new(n: usize, dims: usize) -> Self {
        Self {
            n,
            dims,
            w: vec![0.0; n * n],
        }
    }

    /// Returns KL(P || Q) and writes the gradient of KL(p_scale·P || Q)
    /// into `grad`.
    fn evaluate(&mut self, p: &[f64], p_scale: f64, y: &[f64], grad: &mut [f64]) -> f64 {
        let (n, dims) = (self.n, self.dims);
        let mut z = 0.0;
        for i in 0..n {
            self.w[i * n + i] = 0.0;
            for j in (i + 1)..n {
                let mut s = 0.0;
                for k in 0..dims {
                    let diff = y[i * dims + k] - y[j * dims + k];
                    s += diff * diff;
                }
                let w = 1.0 / (1.0 + s);
                self.w[i * n + j] = w;
                self.w[j * n + i] = w;
            }
        }
        for i in 0..n {
            z += self.w[i * n..(i + 1) * n].iter().sum::<f64>();
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = self.w[i * n + j];
                let q = w / z;
                let pk = p[i * n + j];
                if pk > 0.0 {
                    kl += pk * (pk / q).ln();
                }
                let coef = 4.0 * (p_scale * pk - q) * w;
                for k in 0..dims {
                    grad[i * dims + k] += coef * (y[i * dims + k] - y[j * dims + k]);
                }
            }
        }
        kl
    }
}

/// KL(P || Q) and its gradient with respect to the layout `y` (`n x dims`).
/// `p` must be a symmetric joint distribution.
pub fn kl_divergence_and_gradient(p: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = y.nrows();
    let dims = y.ncols();
    let p_flat: Vec<f64> = (0..n).flat_map(|i| p.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let y_flat: Vec<f64> = (0..n).flat_map(|i| y.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let mut grad = vec![0.0; n * dims];
    let mut state = KlState::new(n, dims);
    let kl = state.evaluate(&p_flat, 1.0, &y_flat, &mut grad);
    (kl, DMatrix::from_row_slice(n, dims, &grad))
}

/// Embed the rows of `x` into `config.output_dims` coordinates.
pub fn tsne(x: &DMatrix<f64>, config: &TsneConfig) -> Result<Embedding> {
    let n = x.nrows();
    check_perplexity(n, config.perplexity)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("t-SNE input contains non-finite values"));
    }
    if config.output_dims == 0 {
        return Err(Error::invalid("t-SNE output dimension must be positive"));
    }
    let dims = config.output_dims;
    let dist = squared_distances(x);
    let (cond, _) = conditional_affinities(&dist, n, config.perplexity);
    let p = symmetrize(&cond, n);
    let learning_rate = config.learning_rate.unwrap_or(n as f64 / 12.0);

    let mut rng = rng::keyed_rng(config.seed, &[0x75e]);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut y: Vec<f64> = (0..n * dims).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * dims];
    let mut gains = vec![1.0f64; n * dims];
    let mut grad = vec![0.0; n * dims];
    let mut state = KlState::new(n, dims);
    let mut trace = Vec::with_capacity(config.iterations + 1);

    for iter in 0..config.iterations {
        let exaggerating = iter < config.exaggeration_iterations;
        let scale = if exaggerating { config.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating { config.momentum } else { config.final_momentum };
        let kl = state.evaluate(&p, scale, &y, &mut grad);
        trace.push(kl);
        for idx in 0..n * dims {
            gains[idx] = if (grad[idx] > 0.0) != (update[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(0.01)
            };
            update[idx] = momentum * update[idx] - learning_rate * gains[idx] * grad[idx];
            y[idx] += update[idx];
        }
        for k in 0..dims {
            let m = (0..n).map(|i| y[i * dims + k]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * dims + k] -= m);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("t-SNE layout became non-finite at iteration {iter}")));
        }
    }
    trace.push(state.evaluate(&p, 1.0, &y, &mut grad));

    Ok(Embedding {
        coordinates: DMatrix::from_row_slice(n, dims, &y),
        method: EmbeddingMethod::Tsne,
        params: EmbeddingParams {
            components: dims,
            perplexity: Some(config.perplexity),
            iterations: Some(config.iterations),
            seed: Some(config.seed),
        },
        objective_trace: trace,
    })
}
