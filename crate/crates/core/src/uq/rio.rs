//! GP regression on network residuals with a composite kernel
//! `k_in(x, x') + k_out(yhat, yhat')`, both squared-exponential.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{UqEstimate, UqSource};
use crate::error::{Error, Result};
use crate::rng;

const N_PARAMS: usize = 5;
const LOG_BOUNDS: (f64, f64) = (-13.8, 13.8);
const JITTER_ESCALATIONS: u32 = 3;
const NEGATIVE_VARIANCE_TOLERANCE: f64 = 1e-10;
/// Squared Cholesky pivots below this fraction of the diagonal scale count as failure.
const PIVOT_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub signal_var_in: f64,
    pub length_in: f64,
    pub signal_var_out: f64,
    pub length_out: f64,
    pub noise_var: f64,
    /// Diagonal jitter relative to the mean kernel diagonal.
    pub jitter: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            signal_var_in: 1.0,
            length_in: 1.0,
            signal_var_out: 1.0,
            length_out: 1.0,
            noise_var: 1.0,
            jitter: 1e-8,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.signal_var_in, self.length_in, self.signal_var_out, self.length_out, self.noise_var];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("kernel parameters must be positive and finite: {self:?}")));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        Ok(())
    }

    /// `[ln sv_in, ln l_in, ln sv_out, ln l_out, ln noise]`.
    pub fn log_params(&self) -> [f64; N_PARAMS] {
        [
            self.signal_var_in.ln(),
            self.length_in.ln(),
            self.signal_var_out.ln(),
            self.length_out.ln(),
            self.noise_var.ln(),
        ]
    }

    pub fn from_log_params(p: [f64; N_PARAMS], jitter: f64) -> Self {
        Self {
            signal_var_in: p[0].exp(),
            length_in: p[1].exp(),
            signal_var_out: p[2].exp(),
            length_out: p[3].exp(),
            noise_var: p[4].exp(),
            jitter,
        }
    }

    /// Data-scaled starting point: residual variance split between the two
    /// kernels and the noise, length scales at the median pairwise distance
    /// (inputs) and the spread of the predictions (outputs).
    pub fn heuristic(x: &DMatrix<f64>, yhat: &[f64], residuals: &[f64]) -> Self {
        let var = crate::stats::pop_std(residuals).powi(2).max(1e-6);
        let mut d = Vec::with_capacity(x.nrows() * x.nrows().saturating_sub(1) / 2);
        for i in 0..x.nrows() {
            for j in i + 1..x.nrows() {
                d.push((x.row(i) - x.row(j)).norm());
            }
        }
        d.sort_by(f64::total_cmp);
        let median = if d.is_empty() { 1.0 } else { crate::stats::quantile_sorted(&d, 0.5) };
        let spread = crate::stats::pop_std(yhat);
        let pos = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
        Self {
            signal_var_in: var * 0.45,
            length_in: pos(median),
            signal_var_out: var * 0.45,
            length_out: pos(spread),
            noise_var: var * 0.1,
            jitter: 1e-8,
        }
    }
}

fn se(signal_var: f64, length: f64, d2: f64) -> f64 {
    signal_var * (-d2 / (2.0 * length * length)).exp()
}

/// `sv_in exp(-|xi-xj|^2 / 2 l_in^2) + sv_out exp(-(yi-yj)^2 / 2 l_out^2)`.
pub fn composite_kernel(xi: &[f64], yhat_i: f64, xj: &[f64], yhat_j: f64, c: &KernelConfig) -> f64 {
    let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
    let dy = yhat_i - yhat_j;
    se(c.signal_var_in, c.length_in, d2) + se(c.signal_var_out, c.length_out, dy * dy)
}

fn sq_dists(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn sq_dists_1d(y: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(y.len(), y.len(), |i, j| (y[i] - y[j]).powi(2))
}

/// Noise-free composite kernel matrix over the training pairs.
pub fn kernel_matrix(x: &DMatrix<f64>, yhat: &[f64], c: &KernelConfig) -> DMatrix<f64> {
    let d_in = sq_dists(x);
    let d_out = sq_dists_1d(yhat);
    d_in.map(|d| se(c.signal_var_in, c.length_in, d)) + d_out.map(|d| se(c.signal_var_out, c.length_out, d))
}

struct Factorization {
    k_in: DMatrix<f64>,
    k_out: DMatrix<f64>,
    d_in: DMatrix<f64>,
    d_out: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal.
    jitter_abs: f64,
    /// Multiplier `10^level` applied to the relative jitter.
    jitter_scale: f64,
}

fn factorize(x: &DMatrix<f64>, yhat: &[f64], c: &KernelConfig) -> Result<Factorization> {
    c.validate()?;
    let n = x.nrows();
    let d_in = sq_dists(x);
    let d_out = sq_dists_1d(yhat);
    let k_in = d_in.map(|d| se(c.signal_var_in, c.length_in, d));
    let k_out = d_out.map(|d| se(c.signal_var_out, c.length_out, d));
    let base = &k_in + &k_out + DMatrix::identity(n, n) * c.noise_var;
    let mean_diag = c.signal_var_in + c.signal_var_out;
    let mut last_jitter = 0.0;
    for level in 0..=JITTER_ESCALATIONS {
        let jitter_scale = 10f64.powi(level as i32);
        let jitter_abs = c.jitter * jitter_scale * mean_diag;
        last_jitter = jitter_abs;
        let m = &base + DMatrix::identity(n, n) * jitter_abs;
        let floor = PIVOT_FLOOR * (mean_diag + c.noise_var + jitter_abs);
        if let Some(chol) = Cholesky::new(m).filter(|ch| ch.l_dirty().diagonal().iter().all(|d| d * d > floor)) {
            if level > 0 {
                log::debug!("kernel matrix needed jitter {jitter_abs:e}");
            }
            return Ok(Factorization {
                k_in,
                k_out,
                d_in,
                d_out,
                chol,
                jitter_abs,
                jitter_scale,
            });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last_jitter })
}

/// Log marginal likelihood and its gradient with respect to
/// [`KernelConfig::log_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lml {
    pub value: f64,
    pub gradient: [f64; N_PARAMS],
    pub jitter_abs: f64,
}

fn check_training(x: &DMatrix<f64>, yhat: &[f64], r: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("GP needs at least one training point"));
    }
    for len in [yhat.len(), r.len()] {
        if len != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: len,
            });
        }
    }
    Ok(())
}

pub fn log_marginal_likelihood(x: &DMatrix<f64>, yhat: &[f64], r: &[f64], c: &KernelConfig) -> Result<Lml> {
    check_training(x, yhat, r)?;
    let f = factorize(x, yhat, c)?;
    Ok(lml_from(&f, r, c))
}

fn lml_from(f: &Factorization, r: &[f64], c: &KernelConfig) -> Lml {
    let n = r.len();
    let rv = DVector::from_column_slice(r);
    let alpha = f.chol.solve(&rv);
    let log_det: f64 = 2.0 * f.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * rv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dLML/dθ = ½ tr((ααᵀ - C⁻¹) ∂C/∂θ)
    let w = &alpha * alpha.transpose() - f.chol.inverse();
    let trace_with = |dc: &DMatrix<f64>| 0.5 * w.component_mul(dc).sum();
    let trace_diag = |s: f64| 0.5 * s * w.trace();
    let rel = c.jitter * f.jitter_scale;
    let l_in2 = c.length_in * c.length_in;
    let l_out2 = c.length_out * c.length_out;
    let gradient = [
        trace_with(&f.k_in) + trace_diag(rel * c.signal_var_in),
        trace_with(&f.k_in.component_mul(&f.d_in.map(|d| d / l_in2))),
        trace_with(&f.k_out) + trace_diag(rel * c.signal_var_out),
        trace_with(&f.k_out.component_mul(&f.d_out.map(|d| d / l_out2))),
        trace_diag(c.noise_var),
    ];
    Lml {
        value,
        gradient,
        jitter_abs: f.jitter_abs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RioSettings {
    /// Optimizer starts: the initial configuration plus `starts - 1`
    /// perturbations of it.
    pub starts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Whether the predictive standard deviation includes the noise variance.
    pub include_noise: bool,
}

impl Default for RioSettings {
    fn default() -> Self {
        Self {
            starts: 5,
            iterations: 500,
            learning_rate: 0.05,
            include_noise: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RioModel {
    train_x: DMatrix<f64>,
    train_yhat: Vec<f64>,
    residuals: Vec<f64>,
    kernel: KernelConfig,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter_abs: f64,
    lml: f64,
    best_start: usize,
    include_noise: bool,
}

impl RioModel {
    /// Condition the GP on `y - yhat` with fixed hyperparameters.
    pub fn with_kernel(
        train_x: &DMatrix<f64>,
        train_yhat: &[f64],
        train_y: &[f64],
        kernel: KernelConfig,
        include_noise: bool,
    ) -> Result<Self> {
        check_training(train_x, train_yhat, train_y)?;
        let residuals: Vec<f64> = train_y.iter().zip(train_yhat).map(|(y, p)| y - p).collect();
        let f = factorize(train_x, train_yhat, &kernel)?;
        let lml = lml_from(&f, &residuals, &kernel).value;
        let alpha = f.chol.solve(&DVector::from_column_slice(&residuals));
        Ok(Self {
            train_x: train_x.clone(),
            train_yhat: train_yhat.to_vec(),
            residuals,
            kernel,
            chol: f.chol,
            alpha,
            jitter_abs: f.jitter_abs,
            lml,
            best_start: 0,
            include_noise,
        })
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn best_start(&self) -> usize {
        self.best_start
    }

    pub fn jitter_abs(&self) -> f64 {
        self.jitter_abs
    }

    /// Lower Cholesky factor of `K + (noise + jitter) I`.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

fn clamp_log(p: &mut [f64; N_PARAMS]) {
    for v in p.iter_mut() {
        *v = v.clamp(LOG_BOUNDS.0, LOG_BOUNDS.1);
    }
}

/// Adam ascent on the log parameters; returns the best point visited.
fn ascend(
    x: &DMatrix<f64>,
    yhat: &[f64],
    r: &[f64],
    start: [f64; N_PARAMS],
    jitter: f64,
    settings: &RioSettings,
) -> Result<(f64, [f64; N_PARAMS])> {
    let mut p = start;
    clamp_log(&mut p);
    let eval = |p: &[f64; N_PARAMS]| log_marginal_likelihood(x, yhat, r, &KernelConfig::from_log_params(*p, jitter));
    let mut cur = eval(&p)?;
    let mut best = (cur.value, p);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = [0.0; N_PARAMS];
    let mut v = [0.0; N_PARAMS];
    for t in 1..=settings.iterations {
        if cur.gradient.iter().all(|g| g.abs() < 1e-8) {
            break;
        }
        for i in 0..N_PARAMS {
            let g = cur.gradient[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            p[i] += settings.learning_rate * mh / (vh.sqrt() + eps);
        }
        clamp_log(&mut p);
        cur = match eval(&p) {
            Ok(l) if l.value.is_finite() => l,
            _ => break,
        };
        if cur.value > best.0 {
            best = (cur.value, p);
        }
    }
    Ok(best)
}

/// Fit the residual GP by multi-start maximization of the log marginal
/// likelihood. Start 0 is `init`; the others add independent
/// `U(-2, 2)` offsets to each log parameter. Best value wins, ties by
/// lowest start index.
pub fn fit_rio(
    train_x: &DMatrix<f64>,
    train_yhat: &[f64],
    train_y: &[f64],
    init: &KernelConfig,
    settings: &RioSettings,
    seed: u64,
) -> Result<RioModel> {
    check_training(train_x, train_yhat, train_y)?;
    if train_x.nrows() < 2 {
        return Err(Error::invalid("RIO needs at least 2 training points"));
    }
    if settings.starts == 0 {
        return Err(Error::invalid("RIO needs at least one optimizer start"));
    }
    init.validate()?;
    let residuals: Vec<f64> = train_y.iter().zip(train_yhat).map(|(y, p)| y - p).collect();
    let base = init.log_params();
    let mut r = rng::keyed_rng(seed, &[0x610]);
    let starts: Vec<[f64; N_PARAMS]> = (0..settings.starts)
        .map(|s| {
            let mut p = base;
            if s > 0 {
                for v in p.iter_mut() {
                    *v += r.random_range(-2.0..=2.0);
                }
            }
            p
        })
        .collect();
    let results: Vec<Result<(f64, [f64; N_PARAMS])>> = starts
        .par_iter()
        .map(|s| ascend(train_x, train_yhat, &residuals, *s, init.jitter, settings))
        .collect();
    let mut best: Option<(f64, usize, [f64; N_PARAMS])> = None;
    let mut last_err = None;
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok((v, p)) => {
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, i, p));
                }
            }
            Err(e) => {
                log::warn!("RIO start {i} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    let (_, best_start, p) = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("no RIO start succeeded".into())))?;
    let kernel = KernelConfig::from_log_params(p, init.jitter);
    let mut model = RioModel::with_kernel(train_x, train_yhat, train_y, kernel, settings.include_noise)?;
    model.best_start = best_start;
    Ok(model)
}

/// Posterior residual mean `k*ᵀ alpha` and standard deviation per test
/// point; the corrected prediction is `yhat + residual_mean`.
pub fn rio_predict(model: &RioModel, test_x: &DMatrix<f64>, test_yhat: &[f64]) -> Result<Vec<UqEstimate>> {
    if test_x.ncols() != model.train_x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: model.train_x.ncols(),
            got: test_x.ncols(),
        });
    }
    if test_yhat.len() != test_x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: test_x.nrows(),
            got: test_yhat.len(),
        });
    }
    let c = &model.kernel;
    let n = model.train_x.nrows();
    let prior = c.signal_var_in + c.signal_var_out + if model.include_noise { c.noise_var } else { 0.0 };
    let l = model.chol.l();
    (0..test_x.nrows())
        .into_par_iter()
        .map(|t| {
            let xt: Vec<f64> = test_x.row(t).iter().copied().collect();
            let ks = DVector::from_fn(n, |i, _| {
                let xi: Vec<f64> = model.train_x.row(i).iter().copied().collect();
                composite_kernel(&xt, test_yhat[t], &xi, model.train_yhat[i], c)
            });
            let mean = ks.dot(&model.alpha);
            let v = l
                .solve_lower_triangular(&ks)
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
            let mut var = prior - v.norm_squared();
            if var < 0.0 {
                if var < -NEGATIVE_VARIANCE_TOLERANCE {
                    return Err(Error::Numerical(format!("negative posterior variance {var:e} at test point {t}")));
                }
                var = 0.0;
            }
            Ok(UqEstimate {
                point_mean: test_yhat[t] + mean,
                uncertainty: var.sqrt(),
                residual_mean: Some(mean),
                source: UqSource::Rio,
            })
        })
        .collect()
}
