//! Feedforward ReLU regressor with inverted dropout on hidden units,
//! trained by Adam on mean squared error, plus exhaustive grid search.
//!
//! Inputs are standardized with a scaler fit on the training rows and the
//! target is standardized the same way; both transforms live inside the
//! model so callers always work in raw units.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ScalerParams};
use crate::error::{Error, Result};
use crate::evaluation::r_squared;
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One affine map. `weights` is `fan_in x fan_out`, so `out = in * weights + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.ncols(),
                got: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    fn apply(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = input * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains on the full set every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
    dropout_rate: f64,
    scaler: ScalerParams,
    target_mean: f64,
    target_std: f64,
    train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: MlpModel,
}

impl MlpModel {
    /// Assemble a model from explicit layers. The last layer must have a
    /// single output; consecutive layers must chain.
    pub fn from_layers(layers: Vec<Layer>, dropout_rate: f64, scaler: ScalerParams) -> Result<Self> {
        let model = Self {
            layers,
            dropout_rate,
            scaler,
            target_mean: 0.0,
            target_std: 1.0,
            train_config: None,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        let first = self.layers.first().ok_or_else(|| Error::invalid("model has no layers"))?;
        if first.weights.nrows() != self.scaler.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.scaler.dim(),
                got: first.weights.nrows(),
            });
        }
        for pair in self.layers.windows(2) {
            if pair[0].weights.ncols() != pair[1].weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].weights.ncols(),
                    got: pair[1].weights.nrows(),
                });
            }
        }
        for l in &self.layers {
            if l.weights.ncols() != l.bias.len() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.ncols(),
                    got: l.bias.len(),
                });
            }
        }
        let out = self.layers.last().map(|l| l.weights.ncols()).unwrap_or(0);
        if out != 1 {
            return Err(Error::invalid(format!("output layer must have 1 unit, has {out}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn input_dim(&self) -> usize {
        self.scaler.dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.weights.ncols()).collect()
    }

    pub fn scaler(&self) -> &ScalerParams {
        &self.scaler
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    fn scale_inputs(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.scaler.transform(features)
    }

    fn scale_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.target_mean) / self.target_std)
    }

    /// Forward pass on standardized inputs. `masks` holds one multiplicative
    /// mask per hidden layer (already scaled by `1/(1-p)`), either per row
    /// (`n x width`) or shared (`1 x width`).
    fn forward_scaled(&self, x: &DMatrix<f64>, masks: Option<&[DMatrix<f64>]>) -> DVector<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if l < last {
                h.apply(|v| *v = v.max(0.0));
                if let Some(masks) = masks {
                    apply_mask(&mut h, &masks[l]);
                }
            }
        }
        h.column(0).into_owned()
    }

    /// Row-at-a-time forward pass, so each output is bit-identical no matter
    /// which other rows share the call.
    fn forward_rows(&self, x: &DMatrix<f64>, masks: Option<&[DMatrix<f64>]>) -> DVector<f64> {
        DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| self.forward_scaled(&x.rows(i, 1).into_owned(), masks)[0]),
        )
    }

    /// Predictions in raw target units.
    ///
    /// With `dropout_active`, one stochastic pass is made: each hidden layer
    /// gets a single keep-mask shared by all rows, drawn from a stream keyed
    /// by `(seed, layer)`, so a row's output does not depend on which other
    /// rows are in the batch.
    pub fn predict(&self, features: &DMatrix<f64>, dropout_active: bool, seed: u64) -> Result<DVector<f64>> {
        let x = self.scale_inputs(features)?;
        let out = if dropout_active && self.dropout_rate > 0.0 {
            let masks: Vec<DMatrix<f64>> = self
                .hidden_sizes()
                .iter()
                .enumerate()
                .map(|(l, &w)| {
                    let mut r = rng::keyed_rng(seed, &[l as u64]);
                    bernoulli_mask(&mut r, 1, w, self.dropout_rate)
                })
                .collect();
            self.forward_rows(&x, Some(&masks))
        } else {
            self.forward_rows(&x, None)
        };
        Ok(out.map(|v| v * self.target_std + self.target_mean))
    }

    /// Mean squared error on standardized targets (dropout off) and its
    /// gradient with respect to every weight and bias.
    pub fn loss_and_gradient(&self, features: &DMatrix<f64>, target: &DVector<f64>) -> Result<(f64, Vec<Layer>)> {
        if features.nrows() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: target.len(),
            });
        }
        let x = self.scale_inputs(features)?;
        let t = self.scale_targets(target);
        Ok(self.backprop(&x, &t, None))
    }

    fn backprop(&self, x: &DMatrix<f64>, t: &DVector<f64>, masks: Option<&[DMatrix<f64>]>) -> (f64, Vec<Layer>) {
        let n = x.nrows() as f64;
        let last = self.layers.len() - 1;
        // activations[l] is the input to layer l
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            activations.push(h.clone());
            h = layer.apply(&h);
            if l < last {
                pre.push(h.clone());
                h.apply(|v| *v = v.max(0.0));
                if let Some(masks) = masks {
                    apply_mask(&mut h, &masks[l]);
                }
            }
        }
        let resid = h.column(0) - t;
        let loss = resid.norm_squared() / n;

        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = DMatrix::from_column_slice(resid.len(), 1, (resid * (2.0 / n)).as_slice());
        for l in (0..self.layers.len()).rev() {
            grads[l].weights = activations[l].transpose() * &delta;
            grads[l].bias = delta.row_sum().transpose();
            if l == 0 {
                break;
            }
            let mut upstream = &delta * self.layers[l].weights.transpose();
            if let Some(masks) = masks {
                apply_mask(&mut upstream, &masks[l - 1]);
            }
            upstream.zip_apply(&pre[l - 1], |g, z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = upstream;
        }
        (loss, grads)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &ck)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

fn apply_mask(h: &mut DMatrix<f64>, mask: &DMatrix<f64>) {
    if mask.nrows() == 1 {
        for mut row in h.row_iter_mut() {
            row.component_mul_assign(&mask.row(0));
        }
    } else {
        h.component_mul_assign(mask);
    }
}

/// Keep-mask with entries `1/(1-p)` (kept) or `0` (dropped).
fn bernoulli_mask(r: &mut rng::Rng, rows: usize, cols: usize, p: f64) -> DMatrix<f64> {
    let scale = 1.0 / (1.0 - p);
    DMatrix::from_fn(rows, cols, |_, _| if r.random::<f64>() < p { 0.0 } else { scale })
}

/// He-style uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
fn init_layers(input_dim: usize, hidden: &[usize], seed: u64) -> Vec<Layer> {
    let mut r = rng::keyed_rng(seed, &[0x1417]);
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes
        .windows(2)
        .map(|w| {
            let limit = (6.0 / w[0] as f64).sqrt();
            Layer {
                weights: DMatrix::from_fn(w[0], w[1], |_, _| r.random_range(-limit..limit)),
                bias: DVector::zeros(w[1]),
            }
        })
        .collect()
}

/// One grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperparamGrid {
    pub layer_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropout_rate: f64,
}

impl Default for HyperparamGrid {
    fn default() -> Self {
        Self {
            layer_counts: vec![1, 2, 3],
            widths: vec![16, 64, 256],
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            dropout_rate: 0.3,
        }
    }
}

impl HyperparamGrid {
    /// Cartesian product in enumeration order: layers, then widths, then
    /// learning rates (innermost).
    pub fn points(&self) -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &layers in &self.layer_counts {
            for &width in &self.widths {
                for &lr in &self.learning_rates {
                    out.push(HyperParams {
                        hidden_sizes: vec![width; layers],
                        learning_rate: lr,
                        dropout_rate: self.dropout_rate,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Dropout-free training MSE (standardized units); entry 0 is the initialization.
    pub loss_trace: Vec<f64>,
    /// Validation selection score per entry of `loss_trace`.
    pub valid_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Validation R² when defined; otherwise the negated training loss.
fn selection_score(model: &MlpModel, valid: &Dataset, train_loss: f64) -> f64 {
    if valid.n_rows() >= 2 {
        if let Ok(pred) = model.predict(valid.features(), false, 0) {
            if let Ok(r2) = r_squared(valid.target(), &pred) {
                return r2;
            }
        }
    }
    -train_loss
}

pub fn train_mlp(train: &Dataset, valid: &Dataset, hyper: &HyperParams, settings: &TrainSettings, seed: u64) -> Result<TrainOutcome> {
    if train.n_rows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if valid.n_features() != train.n_features() {
        return Err(Error::DimensionMismatch {
            expected: train.n_features(),
            got: valid.n_features(),
        });
    }
    if hyper.hidden_sizes.is_empty() || hyper.hidden_sizes.contains(&0) {
        return Err(Error::invalid("hidden layer sizes must be non-empty and positive"));
    }
    if !(hyper.learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    let scaler = ScalerParams::fit(train.features());
    let y: Vec<f64> = train.target().iter().copied().collect();
    let target_mean = crate::stats::mean(&y);
    let target_std = match crate::stats::pop_std(&y) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let mut model = MlpModel {
        layers: init_layers(train.n_features(), &hyper.hidden_sizes, seed),
        dropout_rate: hyper.dropout_rate,
        scaler,
        target_mean,
        target_std,
        train_config: Some(TrainConfig {
            hidden_sizes: hyper.hidden_sizes.clone(),
            learning_rate: hyper.learning_rate,
            epochs: settings.epochs,
            batch_size: settings.batch_size,
            seed,
        }),
    };
    model.validate()?;

    let x = model.scale_inputs(train.features())?;
    let t = model.scale_targets(train.target());
    let n = x.nrows();
    let batch = settings.batch_size.unwrap_or(n).clamp(1, n);
    let mut adam = Adam::new(&model.layers, hyper.learning_rate);
    let mut r = rng::keyed_rng(seed, &[0xd20]);
    let mut order: Vec<usize> = (0..n).collect();

    let eval_loss = |m: &MlpModel| (m.forward_scaled(&x, None) - &t).norm_squared() / n as f64;
    let init_loss = eval_loss(&model);
    if !init_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    let mut loss_trace = vec![init_loss];
    let mut valid_trace = vec![selection_score(&model, valid, init_loss)];
    let mut best = (valid_trace[0], 0usize, model.layers.clone());

    for epoch in 1..=settings.epochs {
        if batch < n {
            order.shuffle(&mut r);
        }
        for chunk in order.chunks(batch) {
            let (xb, tb) = if batch < n {
                (x.select_rows(chunk), DVector::from_iterator(chunk.len(), chunk.iter().map(|&i| t[i])))
            } else {
                (x.clone(), t.clone())
            };
            let masks: Option<Vec<DMatrix<f64>>> = (model.dropout_rate > 0.0).then(|| {
                hyper
                    .hidden_sizes
                    .iter()
                    .map(|&w| bernoulli_mask(&mut r, xb.nrows(), w, model.dropout_rate))
                    .collect()
            });
            let (loss, grads) = model.backprop(&xb, &tb, masks.as_deref());
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut model.layers, &grads);
        }
        let loss = eval_loss(&model);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let score = selection_score(&model, valid, loss);
        loss_trace.push(loss);
        valid_trace.push(score);
        if score > best.0 {
            best = (score, epoch, model.layers.clone());
        }
    }
    model.layers = best.2;
    Ok(TrainOutcome {
        model,
        loss_trace,
        valid_trace,
        best_epoch: best.1,
    })
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    fn new(layers: &[Layer], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: layers.iter().map(Layer::zeros_like).collect(),
            v: layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[Layer]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (l, layer) in layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                grads[l].weights.as_slice(),
                self.m[l].weights.as_mut_slice(),
                self.v[l].weights.as_mut_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                grads[l].bias.as_slice(),
                self.m[l].bias.as_mut_slice(),
                self.v[l].bias.as_mut_slice(),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub index: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// `None` when the candidate diverged.
    pub train_r2: Option<f64>,
    pub valid_r2: Option<f64>,
    pub best_epoch: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: TrainOutcome,
    pub best_index: usize,
    pub report: Vec<SearchRow>,
}

/// Train every grid point (concurrently; each candidate owns the stream
/// `derive_seed(seed, [index])`) and keep the one with the highest
/// validation score, earliest index on ties.
pub fn hyperparameter_search(
    train: &Dataset,
    valid: &Dataset,
    grid: &HyperparamGrid,
    settings: &TrainSettings,
    seed: u64,
) -> Result<SearchResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("hyperparameter grid is empty"));
    }
    let outcomes: Vec<(u64, Result<TrainOutcome>)> = points
        .par_iter()
        .enumerate()
        .map(|(i, hp)| {
            let s = rng::derive_seed(seed, &[i as u64]);
            (s, train_mlp(train, valid, hp, settings, s))
        })
        .collect();

    let mut report = Vec::with_capacity(points.len());
    let mut best: Option<(f64, usize)> = None;
    for (i, ((s, outcome), hp)) in outcomes.iter().zip(&points).enumerate() {
        let mut row = SearchRow {
            index: i,
            hidden_layers: hp.hidden_sizes.len(),
            width: hp.hidden_sizes[0],
            learning_rate: hp.learning_rate,
            seed: *s,
            train_r2: None,
            valid_r2: None,
            best_epoch: None,
            status: String::new(),
        };
        match outcome {
            Ok(o) => {
                let train_pred = o.model.predict(train.features(), false, 0)?;
                row.train_r2 = r_squared(train.target(), &train_pred).ok();
                let score = o.valid_trace[o.best_epoch];
                row.valid_r2 = if valid.n_rows() >= 2 {
                    Some(score)
                } else {
                    None
                };
                row.best_epoch = Some(o.best_epoch);
                row.status = "ok".into();
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, i));
                }
            }
            Err(e) => {
                log::warn!("grid point {i} failed: {e}");
                row.status = format!("failed: {e}");
            }
        }
        report.push(row);
    }
    let (_, best_index) = best.ok_or_else(|| Error::Numerical("every hyperparameter candidate failed".into()))?;
    let best = outcomes
        .into_iter()
        .nth(best_index)
        .and_then(|(_, o)| o.ok())
        .expect("best candidate succeeded");
    Ok(SearchResult {
        best,
        best_index,
        report,
    })
}

/// `search_report.csv`: one row per grid point.
pub fn write_search_report(path: impl AsRef<Path>, rows: &[SearchRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "index",
        "hidden_layers",
        "width",
        "learning_rate",
        "seed",
        "train_r2",
        "valid_r2",
        "best_epoch",
        "status",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.hidden_layers.to_string(),
            r.width.to_string(),
            r.learning_rate.to_string(),
            r.seed.to_string(),
            opt(r.train_r2),
            opt(r.valid_r2),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
