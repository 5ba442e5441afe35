//! The six pipeline stages. Each stage reads its inputs from the output
//! directory, writes its files under a stage subdirectory and records
//! configuration, input and output hashes in the manifest so an unchanged
//! stage is skipped on the next run.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use uqkit::clustering::{
    dbscan, load_external_labels, load_split_csv, make_cluster_splits, write_labels_csv, write_split_csv, ClusterLabels,
    SplitSpec,
};
use uqkit::dataset::{
    generate_synthetic, load_dataset, rank_correlated_features, save_dataset, standardize, CsvSchema, Dataset,
};
use uqkit::embedding::{pca, tsne, write_embedding_csv, write_kl_trace_csv};
use uqkit::evaluation::{
    cross_cluster_table, evaluation_rows, novelty_separation, removal_curve, uq_summary_stats, write_boxplot_csv,
    write_r2_matrix_csv, write_removal_curve_csv, BoxplotStats, R2Matrix,
};
use uqkit::mlp::{hyperparameter_search, write_search_report, MlpModel};
use uqkit::stats::quantile_sorted;
use uqkit::uq::{
    fit_ad, fit_rio, mc_dropout, rio_predict, write_ad_csv, write_dropout_csv, write_rio_csv, KernelConfig,
    McDropoutConfig,
};

use crate::config::{RunConfig, SeedStream, UqMethod};
use crate::error::{CliError, Result, StageContext};
use crate::manifest::{hash_files, Manifest, StageRecord};
use crate::verify::{verify_outputs, VerifyReport};

/// Removal-curve score columns in `uq_scores.csv`, with the method they need.
/// `abs_error` is the oracle ranking by the actual error.
pub const CURVE_SCORES: [(&str, Option<UqMethod>); 5] = [
    ("dropout", Some(UqMethod::Dropout)),
    ("ad_dd", Some(UqMethod::Ad)),
    ("ad_ld", Some(UqMethod::Ad)),
    ("rio", Some(UqMethod::Rio)),
    ("abs_error", None),
];

/// Exclusive ownership of an output directory for the life of a run.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked { dir: dir.to_path_buf() }),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Data shared by every stage after `split`.
pub struct Prepared {
    pub data: Dataset,
    pub labels: ClusterLabels,
    pub splits: Vec<SplitSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitRow {
    split: usize,
    train_cluster: i64,
    n_train: usize,
    n_valid: usize,
    n_holdout: usize,
    n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PointRow {
    id: String,
    in_cluster: bool,
    y: f64,
    yhat: f64,
}

#[derive(Debug, Deserialize)]
struct DropoutRow {
    id: String,
    pred_mean: f64,
    pred_std: f64,
}

#[derive(Debug, Deserialize)]
struct AdRow {
    id: String,
    ad_dd: f64,
    ad_ld: f64,
    novel_at_alpha: bool,
}

#[derive(Debug, Deserialize)]
struct RioRow {
    id: String,
    residual_mean: f64,
    residual_std: f64,
    corrected_pred: f64,
}

/// One row of `eval/uq_scores.csv`. Columns of methods that were not run are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub split: usize,
    pub train_cluster: i64,
    pub id: String,
    pub in_cluster: bool,
    pub y: f64,
    pub yhat: f64,
    pub dropout_mean: Option<f64>,
    pub dropout_std: Option<f64>,
    pub ad_dd: Option<f64>,
    pub ad_ld: Option<f64>,
    pub novel: Option<bool>,
    pub rio_residual_mean: Option<f64>,
    pub rio_std: Option<f64>,
    pub rio_corrected: Option<f64>,
}

impl ScoreRow {
    /// Score used to rank this point for the named removal curve.
    pub fn curve_score(&self, name: &str) -> Option<f64> {
        match name {
            "dropout" => self.dropout_std,
            "ad_dd" => self.ad_dd,
            "ad_ld" => self.ad_ld,
            "rio" => self.rio_std,
            "abs_error" => Some((self.y - self.yhat).abs()),
            _ => None,
        }
    }
}

/// One row of `eval/cross_predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub split: usize,
    pub train_cluster: i64,
    pub eval_cluster: i64,
    pub id: String,
    pub y: f64,
    pub yhat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoveltyRow {
    pub split: usize,
    pub train_cluster: i64,
    pub n_in: usize,
    pub n_out: usize,
    pub ad_dd_median_in: Option<f64>,
    pub ad_dd_median_out: Option<f64>,
    pub novel_rate_in: Option<f64>,
    pub novel_rate_out: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: usize,
    pub train_cluster: i64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_holdout: usize,
    pub n_test: usize,
    pub best_candidate: usize,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub r2_within: Option<f64>,
    pub r2_cross_mean: Option<f64>,
    pub ad_dd_median_in: Option<f64>,
    pub ad_dd_median_out: Option<f64>,
    pub novel_rate_in: Option<f64>,
    pub novel_rate_out: Option<f64>,
    /// R² before and after the first removal step, per curve.
    pub removal_first_step: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub n_rows: usize,
    pub features: Vec<String>,
    pub label_source: String,
    pub cluster_sizes: BTreeMap<i64, usize>,
    pub uq_methods: Vec<UqMethod>,
    pub splits: Vec<SplitSummary>,
    pub r2_matrix: R2Matrix,
    pub verification: VerifyReport,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
    _lock: OutputLock,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], stage: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).stage(stage)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .stage(stage)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

fn check_ids(stage: &str, path: &Path, expected: &[String], got: impl Iterator<Item = String>) -> Result<()> {
    let got: Vec<String> = got.collect();
    if got != expected {
        return Err(CliError::Stage {
            stage: stage.into(),
            source: uqkit::Error::Data(format!("{}: ids do not match points.csv", path.display())),
        });
    }
    Ok(())
}

impl Pipeline {
    /// Validate the configuration and take the output directory lock.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.paths.out.clone();
        create_dir(&out)?;
        let lock = OutputLock::acquire(&out)?;
        let manifest = Manifest::load(&out)?;
        Ok(Self {
            cfg,
            out,
            manifest,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn split_dir(&self, stage: &str, k: usize) -> PathBuf {
        self.out.join(stage).join(format!("split_{k}"))
    }

    /// Dataset location and the schema it is read with. Synthetic data always
    /// uses the default column names.
    fn dataset_source(&self) -> (PathBuf, CsvSchema) {
        match &self.cfg.paths.dataset {
            Some(p) => (p.clone(), self.cfg.schema()),
            None => (self.dir("synth/dataset.csv"), CsvSchema::default()),
        }
    }

    fn require(&self, stage: &str, path: PathBuf, needs: &'static str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingInput {
                stage: stage.into(),
                path,
                needs,
            })
        }
    }

    fn dataset_input(&self, stage: &str) -> Result<PathBuf> {
        let (path, _) = self.dataset_source();
        let needs = if self.cfg.paths.dataset.is_some() { "split" } else { "synth" };
        if self.cfg.paths.dataset.is_some() && !path.exists() {
            return Err(CliError::Stage {
                stage: stage.into(),
                source: uqkit::Error::Data(format!("dataset {} does not exist", path.display())),
            });
        }
        self.require(stage, path, needs)
    }

    /// Run `body` unless the manifest shows the stage is current. Returns
    /// whether the stage ran.
    fn run_stage(
        &mut self,
        name: &str,
        config_hash: String,
        inputs: &[PathBuf],
        body: impl FnOnce(&Self) -> Result<Vec<PathBuf>>,
    ) -> Result<bool> {
        let input_hashes = hash_files(&self.out, inputs)?;
        if let Some(rec) = self.manifest.stages.get(name) {
            if rec.is_current(&self.out, &config_hash, &input_hashes) {
                info!("{name}: up to date, skipped");
                return Ok(false);
            }
        }
        let start = Instant::now();
        let outputs = body(self)?;
        let record = StageRecord {
            config_hash,
            inputs: input_hashes,
            outputs: hash_files(&self.out, &outputs)?,
        };
        self.manifest.stages.insert(name.to_string(), record);
        self.manifest.save(&self.out)?;
        info!("{name}: finished in {:.2?}", start.elapsed());
        Ok(true)
    }

    pub fn synth(&mut self) -> Result<bool> {
        const STAGE: &str = "synth";
        let syn = self.cfg.synthetic();
        let hash = RunConfig::hash_of(&syn);
        let dir = self.dir(STAGE);
        self.run_stage(STAGE, hash, &[], |_| {
            let (data, labels) = generate_synthetic(&syn).stage(STAGE)?;
            create_dir(&dir)?;
            let (ds, lab) = (dir.join("dataset.csv"), dir.join("labels.csv"));
            save_dataset(&data, &ds).stage(STAGE)?;
            write_labels_csv(&lab, data.ids(), &labels).stage(STAGE)?;
            info!("{STAGE}: {} rows, {} features", data.n_rows(), data.n_features());
            Ok(vec![ds, lab])
        })
    }

    pub fn split(&mut self) -> Result<bool> {
        const STAGE: &str = "split";
        let mut inputs = vec![self.dataset_input(STAGE)?];
        if let Some(l) = &self.cfg.paths.labels {
            if !l.exists() {
                return Err(CliError::Stage {
                    stage: STAGE.into(),
                    source: uqkit::Error::Data(format!("labels file {} does not exist", l.display())),
                });
            }
            inputs.push(l.clone());
        }
        let c = &self.cfg;
        let hash = RunConfig::hash_of(&(
            &c.features,
            &c.embedding,
            &c.clustering,
            c.paths.labels.is_some(),
            c.tsne().seed,
            c.stage_seed(SeedStream::Split, &[]),
        ));
        self.run_stage(STAGE, hash, &inputs, |p| p.split_body())
    }

    fn split_body(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "split";
        let c = &self.cfg;
        let dir = self.dir(STAGE);
        create_dir(&dir)?;
        let mut outputs = Vec::new();
        let (path, schema) = self.dataset_source();
        let data = load_dataset(&path, &schema).stage(STAGE)?;

        let selected = match c.features.correlation_threshold {
            Some(thr) => {
                let ranking = rank_correlated_features(&data, thr);
                let p = dir.join("ranking.csv");
                write_rows(&p, &ranking.entries, STAGE)?;
                outputs.push(p);
                let names = ranking.feature_names();
                if names.is_empty() {
                    return Err(CliError::Stage {
                        stage: STAGE.into(),
                        source: uqkit::Error::Data(format!("no feature has |r| > {thr} with the target")),
                    });
                }
                names
            }
            None => data.feature_names().to_vec(),
        };
        let p = dir.join("selected_features.csv");
        #[derive(Serialize)]
        struct Feature<'a> {
            feature: &'a str,
        }
        let rows: Vec<Feature> = selected.iter().map(|f| Feature { feature: f }).collect();
        write_rows(&p, &rows, STAGE)?;
        outputs.push(p);
        let data = data.select_features(&selected).stage(STAGE)?;
        info!("{STAGE}: {} of {} features kept", selected.len(), schema_width(&path, &schema)?);

        let external = match &c.paths.labels {
            Some(l) => Some(load_external_labels(l, &data).stage(STAGE)?),
            None => None,
        };
        let embedded = if external.is_none() || c.embedding.force {
            let (z, _) = standardize(&data).stage(STAGE)?;
            let m = c.embedding.pca_components.min(z.n_features()).min(z.n_rows());
            let projected = pca(z.features(), m).stage(STAGE)?;
            let emb = tsne(&projected.embedding.coordinates, &c.tsne()).stage(STAGE)?;
            let (ep, kp) = (dir.join("embedding.csv"), dir.join("kl_trace.csv"));
            write_embedding_csv(&ep, data.ids(), &emb).stage(STAGE)?;
            write_kl_trace_csv(&kp, &emb.objective_trace).stage(STAGE)?;
            outputs.extend([ep, kp]);
            if let (Some(first), Some(last)) = (emb.objective_trace.first(), emb.objective_trace.last()) {
                info!("{STAGE}: t-SNE KL {first:.4} -> {last:.4}");
            }
            Some(emb)
        } else {
            info!("{STAGE}: external labels supplied, embedding skipped");
            None
        };
        let labels = match (external, embedded) {
            (Some(l), _) => l,
            (None, Some(emb)) => dbscan(&emb.coordinates, c.clustering.eps, c.clustering.min_pts).stage(STAGE)?,
            (None, None) => unreachable!("embedding runs whenever labels are not external"),
        };
        info!("{STAGE}: {} clusters, sizes {:?}", labels.k, labels.sizes());
        let lp = dir.join("labels.csv");
        write_labels_csv(&lp, data.ids(), &labels.labels).stage(STAGE)?;
        outputs.push(lp);

        let cl = &c.clustering;
        let splits = make_cluster_splits(
            &data,
            &labels,
            cl.train_n,
            cl.valid_n,
            cl.min_cluster_size,
            c.stage_seed(SeedStream::Split, &[]),
        )
        .stage(STAGE)?;
        if splits.is_empty() {
            return Err(CliError::Stage {
                stage: STAGE.into(),
                source: uqkit::Error::Data(format!(
                    "no cluster has at least {} members (sizes {:?})",
                    cl.min_cluster_size,
                    labels.sizes()
                )),
            });
        }
        let mut rows = Vec::new();
        for (k, s) in splits.iter().enumerate() {
            let p = dir.join(format!("split_{k}.csv"));
            write_split_csv(&p, data.ids(), s).stage(STAGE)?;
            outputs.push(p);
            rows.push(SplitRow {
                split: k,
                train_cluster: s.train_cluster,
                n_train: s.train_idx.len(),
                n_valid: s.valid_idx.len(),
                n_holdout: s.holdout_idx(&labels).len(),
                n_test: s.test_idx.len(),
            });
        }
        let p = dir.join("splits.csv");
        write_rows(&p, &rows, STAGE)?;
        outputs.push(p);
        info!("{STAGE}: {} splits", splits.len());
        Ok(outputs)
    }

    /// Files every post-split stage depends on.
    fn prepared_inputs(&self, stage: &str) -> Result<Vec<PathBuf>> {
        let mut v = vec![self.dataset_input(stage)?];
        for f in ["selected_features.csv", "labels.csv", "splits.csv"] {
            v.push(self.require(stage, self.dir("split").join(f), "split")?);
        }
        Ok(v)
    }

    pub fn n_splits(&self, stage: &str) -> Result<usize> {
        let p = self.require(stage, self.dir("split/splits.csv"), "split")?;
        Ok(read_rows::<SplitRow>(&p, stage)?.len())
    }

    pub fn prepared(&self, stage: &str) -> Result<Prepared> {
        let dir = self.dir("split");
        let (path, schema) = self.dataset_source();
        let data = load_dataset(&path, &schema).stage(stage)?;
        #[derive(Deserialize)]
        struct Feature {
            feature: String,
        }
        let names: Vec<String> = read_rows::<Feature>(&dir.join("selected_features.csv"), stage)?
            .into_iter()
            .map(|f| f.feature)
            .collect();
        let data = data.select_features(&names).stage(stage)?;
        let labels = load_external_labels(dir.join("labels.csv"), &data).stage(stage)?;
        let n = self.n_splits(stage)?;
        let seed = self.cfg.stage_seed(SeedStream::Split, &[]);
        let splits = (0..n)
            .map(|k| {
                let p = self.require(stage, dir.join(format!("split_{k}.csv")), "split")?;
                load_split_csv(&p, &data, &labels, seed).stage(stage)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { data, labels, splits })
    }

    fn selected_splits(&self, stage: &str, only: Option<usize>) -> Result<Vec<usize>> {
        let n = self.n_splits(stage)?;
        match only {
            Some(k) if k >= n => Err(CliError::Stage {
                stage: stage.into(),
                source: uqkit::Error::InvalidArgument(format!("split {k} does not exist (have {n})")),
            }),
            Some(k) => Ok(vec![k]),
            None => Ok((0..n).collect()),
        }
    }

    pub fn train(&mut self, only: Option<usize>) -> Result<()> {
        for k in self.selected_splits("train", only)? {
            self.train_split(k)?;
        }
        Ok(())
    }

    fn train_split(&mut self, k: usize) -> Result<bool> {
        let stage = format!("train/split_{k}");
        let mut inputs = self.prepared_inputs(&stage)?;
        inputs.push(self.require(&stage, self.dir("split").join(format!("split_{k}.csv")), "split")?);
        let seed = self.cfg.stage_seed(SeedStream::Train, &[k as u64]);
        let hash = RunConfig::hash_of(&(&self.cfg.mlp, seed));
        let dir = self.split_dir("train", k);
        self.run_stage(&stage.clone(), hash, &inputs, |p| {
            let prep = p.prepared(&stage)?;
            let s = &prep.splits[k];
            let train = prep.data.subset(&s.train_idx);
            let valid = prep.data.subset(&s.valid_idx);
            let mut res =
                hyperparameter_search(&train, &valid, &p.cfg.mlp.grid, &p.cfg.mlp.settings(), seed).stage(&stage)?;
            res.report[res.best_index].status = "selected".into();
            create_dir(&dir)?;
            let (mp, rp, lp) = (dir.join("model.json"), dir.join("search_report.csv"), dir.join("loss_trace.csv"));
            res.best.model.save_json(&mp).stage(&stage)?;
            write_search_report(&rp, &res.report).stage(&stage)?;
            #[derive(Serialize)]
            struct Trace {
                epoch: usize,
                train_loss: f64,
                valid_score: f64,
            }
            let trace: Vec<Trace> = res
                .best
                .loss_trace
                .iter()
                .zip(&res.best.valid_trace)
                .enumerate()
                .map(|(epoch, (&train_loss, &valid_score))| Trace {
                    epoch,
                    train_loss,
                    valid_score,
                })
                .collect();
            write_rows(&lp, &trace, &stage)?;
            let best = &res.report[res.best_index];
            info!(
                "{stage}: best candidate {} ({}x{}, lr {}), valid R² {:?}",
                best.index, best.hidden_layers, best.width, best.learning_rate, best.valid_r2
            );
            Ok(vec![mp, rp, lp])
        })
    }

    pub fn uq(&mut self, only: Option<usize>, methods: Option<&[UqMethod]>) -> Result<()> {
        let mut methods: Vec<UqMethod> = methods.unwrap_or(&self.cfg.uq.methods).to_vec();
        methods.sort();
        methods.dedup();
        for k in self.selected_splits("uq", only)? {
            self.uq_split(k, &methods)?;
        }
        Ok(())
    }

    fn model_input(&self, stage: &str, k: usize) -> Result<PathBuf> {
        self.require(stage, self.split_dir("train", k).join("model.json"), "train")
    }

    fn uq_split(&mut self, k: usize, methods: &[UqMethod]) -> Result<bool> {
        let stage = format!("uq/split_{k}");
        let mut inputs = self.prepared_inputs(&stage)?;
        inputs.push(self.require(&stage, self.dir("split").join(format!("split_{k}.csv")), "split")?);
        inputs.push(self.model_input(&stage, k)?);
        let dropout_seed = self.cfg.stage_seed(SeedStream::Dropout, &[k as u64]);
        let rio_seed = self.cfg.stage_seed(SeedStream::Rio, &[k as u64]);
        let hash = RunConfig::hash_of(&(&self.cfg.uq, methods, dropout_seed, rio_seed));
        let dir = self.split_dir("uq", k);
        self.run_stage(&stage.clone(), hash, &inputs, |p| {
            let prep = p.prepared(&stage)?;
            let model = MlpModel::load_json(p.split_dir("train", k).join("model.json")).stage(&stage)?;
            p.uq_body(&stage, &prep, k, &model, methods, dropout_seed, rio_seed, &dir)
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn uq_body(
        &self,
        stage: &str,
        prep: &Prepared,
        k: usize,
        model: &MlpModel,
        methods: &[UqMethod],
        dropout_seed: u64,
        rio_seed: u64,
        dir: &Path,
    ) -> Result<Vec<PathBuf>> {
        let u = &self.cfg.uq;
        let s = &prep.splits[k];
        let mut rows = s.holdout_idx(&prep.labels);
        rows.extend(&s.test_idx);
        rows.sort_unstable();
        let ids: Vec<String> = rows.iter().map(|&r| prep.data.ids()[r].clone()).collect();
        let x_eval = prep.data.features().select_rows(&rows);
        let yhat_eval: Vec<f64> = model.predict(&x_eval, false, 0).stage(stage)?.iter().copied().collect();
        let x_train = prep.data.features().select_rows(&s.train_idx);
        let y_train: Vec<f64> = s.train_idx.iter().map(|&r| prep.data.target()[r]).collect();
        create_dir(dir)?;

        let points: Vec<PointRow> = rows
            .iter()
            .zip(&ids)
            .zip(&yhat_eval)
            .map(|((&r, id), &yhat)| PointRow {
                id: id.clone(),
                in_cluster: prep.labels.labels[r] == s.train_cluster,
                y: prep.data.target()[r],
                yhat,
            })
            .collect();
        let pp = dir.join("points.csv");
        write_rows(&pp, &points, stage)?;
        let mut outputs = vec![pp];

        let scaled = |x: &DMatrix<f64>| model.scaler().transform(x).stage(stage);
        for &m in methods {
            let path = dir.join(m.file_name());
            match m {
                UqMethod::Dropout => {
                    let cfg = McDropoutConfig {
                        passes: u.passes,
                        seed: dropout_seed,
                    };
                    let est = mc_dropout(model, &x_eval, &cfg).stage(stage)?;
                    write_dropout_csv(&path, &ids, &est).stage(stage)?;
                }
                UqMethod::Ad => {
                    let ad = fit_ad(&scaled(&x_train)?, u.k, u.metric).stage(stage)?;
                    let scores = ad.score_all(&scaled(&x_eval)?, u.alpha).stage(stage)?;
                    write_ad_csv(&path, &ids, &scores).stage(stage)?;
                }
                UqMethod::Rio => {
                    let z_train = scaled(&x_train)?;
                    let yhat_train: Vec<f64> = model.predict(&x_train, false, 0).stage(stage)?.iter().copied().collect();
                    let init = match &u.rio_kernel {
                        Some(kc) => kc.clone(),
                        None => {
                            let r: Vec<f64> = y_train.iter().zip(&yhat_train).map(|(y, p)| y - p).collect();
                            KernelConfig::heuristic(&z_train, &yhat_train, &r)
                        }
                    };
                    let rio = fit_rio(&z_train, &yhat_train, &y_train, &init, &u.rio, rio_seed).stage(stage)?;
                    let est = rio_predict(&rio, &scaled(&x_eval)?, &yhat_eval).stage(stage)?;
                    write_rio_csv(&path, &ids, &yhat_eval, &est).stage(stage)?;
                    #[derive(Serialize)]
                    struct Fitted<'a> {
                        kernel: &'a KernelConfig,
                        log_marginal_likelihood: f64,
                        best_start: usize,
                        jitter_abs: f64,
                    }
                    let kp = dir.join("rio_kernel.json");
                    write_json(
                        &kp,
                        &Fitted {
                            kernel: rio.kernel(),
                            log_marginal_likelihood: rio.log_marginal_likelihood(),
                            best_start: rio.best_start(),
                            jitter_abs: rio.jitter_abs(),
                        },
                    )?;
                    outputs.push(kp);
                    info!("{stage}: RIO log marginal likelihood {:.4}", rio.log_marginal_likelihood());
                }
            }
            outputs.push(path);
        }
        Ok(outputs)
    }

    fn uq_inputs(&self, stage: &str, k: usize) -> Result<Vec<PathBuf>> {
        let dir = self.split_dir("uq", k);
        let mut v = vec![self.require(stage, dir.join("points.csv"), "uq")?];
        for m in &self.cfg.uq.methods {
            v.push(self.require(stage, dir.join(m.file_name()), "uq")?);
        }
        Ok(v)
    }

    pub fn eval(&mut self) -> Result<bool> {
        const STAGE: &str = "eval";
        let mut inputs = self.prepared_inputs(STAGE)?;
        let n = self.n_splits(STAGE)?;
        for k in 0..n {
            inputs.push(self.require(STAGE, self.dir("split").join(format!("split_{k}.csv")), "split")?);
            inputs.push(self.model_input(STAGE, k)?);
            inputs.extend(self.uq_inputs(STAGE, k)?);
        }
        let hash = RunConfig::hash_of(&(&self.cfg.eval, &self.cfg.uq.methods, self.cfg.uq.alpha));
        self.run_stage(STAGE, hash, &inputs, |p| p.eval_body())
    }

    /// Assemble the per-point score table for split `k` from the UQ files.
    fn score_rows(&self, stage: &str, k: usize, train_cluster: i64) -> Result<Vec<ScoreRow>> {
        let dir = self.split_dir("uq", k);
        let points: Vec<PointRow> = read_rows(&dir.join("points.csv"), stage)?;
        let ids: Vec<String> = points.iter().map(|p| p.id.clone()).collect();
        let mut rows: Vec<ScoreRow> = points
            .into_iter()
            .map(|p| ScoreRow {
                split: k,
                train_cluster,
                id: p.id,
                in_cluster: p.in_cluster,
                y: p.y,
                yhat: p.yhat,
                dropout_mean: None,
                dropout_std: None,
                ad_dd: None,
                ad_ld: None,
                novel: None,
                rio_residual_mean: None,
                rio_std: None,
                rio_corrected: None,
            })
            .collect();
        for m in &self.cfg.uq.methods {
            let path = dir.join(m.file_name());
            match m {
                UqMethod::Dropout => {
                    let v: Vec<DropoutRow> = read_rows(&path, stage)?;
                    check_ids(stage, &path, &ids, v.iter().map(|r| r.id.clone()))?;
                    for (row, d) in rows.iter_mut().zip(v) {
                        row.dropout_mean = Some(d.pred_mean);
                        row.dropout_std = Some(d.pred_std);
                    }
                }
                UqMethod::Ad => {
                    let v: Vec<AdRow> = read_rows(&path, stage)?;
                    check_ids(stage, &path, &ids, v.iter().map(|r| r.id.clone()))?;
                    for (row, a) in rows.iter_mut().zip(v) {
                        row.ad_dd = Some(a.ad_dd);
                        row.ad_ld = Some(a.ad_ld);
                        row.novel = Some(a.novel_at_alpha);
                    }
                }
                UqMethod::Rio => {
                    let v: Vec<RioRow> = read_rows(&path, stage)?;
                    check_ids(stage, &path, &ids, v.iter().map(|r| r.id.clone()))?;
                    for (row, r) in rows.iter_mut().zip(v) {
                        row.rio_residual_mean = Some(r.residual_mean);
                        row.rio_std = Some(r.residual_std);
                        row.rio_corrected = Some(r.corrected_pred);
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Curves available for the configured methods.
    pub fn curve_names(&self) -> Vec<&'static str> {
        CURVE_SCORES
            .iter()
            .filter(|(_, m)| m.is_none_or(|m| self.cfg.uq.methods.contains(&m)))
            .map(|(n, _)| *n)
            .collect()
    }

    fn eval_body(&self) -> Result<Vec<PathBuf>> {
        const STAGE: &str = "eval";
        let c = &self.cfg;
        let dir = self.dir(STAGE);
        create_dir(&dir)?;
        let prep = self.prepared(STAGE)?;
        let models = (0..prep.splits.len())
            .map(|k| MlpModel::load_json(self.split_dir("train", k).join("model.json")).stage(STAGE))
            .collect::<Result<Vec<_>>>()?;
        let mut outputs = Vec::new();

        let matrix = cross_cluster_table(&models, &prep.data, &prep.labels, &prep.splits).stage(STAGE)?;
        let p = dir.join("r2_matrix.csv");
        write_r2_matrix_csv(&p, &matrix).stage(STAGE)?;
        outputs.push(p);

        let mut cross = Vec::new();
        for (i, model) in models.iter().enumerate() {
            for j in 0..prep.splits.len() {
                let rows = evaluation_rows(&prep.splits, &prep.labels, i, j);
                let pred = model.predict(&prep.data.features().select_rows(&rows), false, 0).stage(STAGE)?;
                cross.extend(rows.iter().zip(pred.iter()).map(|(&r, &yhat)| CrossRow {
                    split: i,
                    train_cluster: prep.splits[i].train_cluster,
                    eval_cluster: prep.splits[j].train_cluster,
                    id: prep.data.ids()[r].clone(),
                    y: prep.data.target()[r],
                    yhat,
                }));
            }
        }
        let p = dir.join("cross_predictions.csv");
        write_rows(&p, &cross, STAGE)?;
        outputs.push(p);

        let curves = self.curve_names();
        let mut all_scores = Vec::new();
        let mut box_rows: Vec<(String, BoxplotStats)> = Vec::new();
        let mut novelty = Vec::new();
        for (k, s) in prep.splits.iter().enumerate() {
            let rows = self.score_rows(STAGE, k, s.train_cluster)?;
            let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
            let yhat: Vec<f64> = rows.iter().map(|r| r.yhat).collect();
            let split_dir = self.split_dir(STAGE, k);
            create_dir(&split_dir)?;
            for name in &curves {
                let unc: Vec<f64> = rows.iter().map(|r| r.curve_score(name).expect("configured method")).collect();
                let curve = removal_curve(&unc, &y, &yhat, c.eval.step_fraction, c.eval.min_remaining).stage(STAGE)?;
                let p = split_dir.join(format!("removal_curve_{name}.csv"));
                write_removal_curve_csv(&p, &curve).stage(STAGE)?;
                outputs.push(p);
            }
            let method_scores: Vec<(String, Vec<f64>)> = curves
                .iter()
                .filter(|n| **n != "abs_error")
                .map(|n| (n.to_string(), rows.iter().map(|r| r.curve_score(n).unwrap()).collect()))
                .collect();
            let summary = uq_summary_stats(&method_scores, &y, &yhat).stage(STAGE)?;
            box_rows.extend(summary.stats.into_iter().map(|b| (k.to_string(), b)));

            let in_cluster: Vec<bool> = rows.iter().map(|r| r.in_cluster).collect();
            let (n_in, n_out) = (in_cluster.iter().filter(|&&b| b).count(), in_cluster.iter().filter(|&&b| !b).count());
            let mut row = NoveltyRow {
                split: k,
                train_cluster: s.train_cluster,
                n_in,
                n_out,
                ad_dd_median_in: None,
                ad_dd_median_out: None,
                novel_rate_in: None,
                novel_rate_out: None,
            };
            if c.uq.methods.contains(&UqMethod::Ad) {
                let dd: Vec<f64> = rows.iter().map(|r| r.ad_dd.unwrap()).collect();
                let pick = |want: bool| -> Vec<f64> {
                    dd.iter().zip(&in_cluster).filter(|(_, &b)| b == want).map(|(v, _)| *v).collect()
                };
                row.ad_dd_median_in = median(&pick(true));
                row.ad_dd_median_out = median(&pick(false));
                let (ri, ro) = novelty_separation(&dd, &in_cluster, c.uq.alpha).stage(STAGE)?;
                row.novel_rate_in = ri;
                row.novel_rate_out = ro;
            }
            novelty.push(row);
            all_scores.extend(rows);
        }
        let p = dir.join("uq_scores.csv");
        write_rows(&p, &all_scores, STAGE)?;
        outputs.push(p);
        let p = dir.join("boxplot_stats.csv");
        write_boxplot_csv(&p, &box_rows).stage(STAGE)?;
        outputs.push(p);
        let p = dir.join("novelty.csv");
        write_rows(&p, &novelty, STAGE)?;
        outputs.push(p);
        Ok(outputs)
    }

    pub fn report(&mut self) -> Result<bool> {
        const STAGE: &str = "report";
        let mut inputs = self.prepared_inputs(STAGE)?;
        let n = self.n_splits(STAGE)?;
        let eval_dir = self.dir("eval");
        for f in ["r2_matrix.csv", "cross_predictions.csv", "uq_scores.csv", "novelty.csv"] {
            inputs.push(self.require(STAGE, eval_dir.join(f), "eval")?);
        }
        for k in 0..n {
            inputs.push(self.require(STAGE, self.split_dir("train", k).join("search_report.csv"), "train")?);
            for name in self.curve_names() {
                inputs.push(self.require(
                    STAGE,
                    self.split_dir("eval", k).join(format!("removal_curve_{name}.csv")),
                    "eval",
                )?);
            }
        }
        let hash = RunConfig::hash_of(&(self.cfg.full_hash(), env!("CARGO_PKG_VERSION")));
        self.run_stage(STAGE, hash, &inputs, |p| {
            let summary = p.summary()?;
            print_summary(&summary);
            let path = p.out.join("summary.json");
            write_json(&path, &summary)?;
            Ok(vec![path])
        })
    }

    fn summary(&self) -> Result<Summary> {
        const STAGE: &str = "report";
        let c = &self.cfg;
        let curves = self.curve_names();
        let verification = verify_outputs(&self.out, &curves, c.eval.step_fraction, c.eval.min_remaining)?;
        let prep = self.prepared(STAGE)?;
        let matrix = uqkit::evaluation::read_r2_matrix_csv(self.dir("eval/r2_matrix.csv")).stage(STAGE)?;
        let novelty: Vec<NoveltyRow> = read_rows(&self.dir("eval/novelty.csv"), STAGE)?;

        let mut stage_seeds = BTreeMap::new();
        stage_seeds.insert("synth".to_string(), c.synthetic().seed);
        stage_seeds.insert("tsne".to_string(), c.tsne().seed);
        stage_seeds.insert("split".to_string(), c.stage_seed(SeedStream::Split, &[]));
        let mut splits = Vec::new();
        for (k, s) in prep.splits.iter().enumerate() {
            stage_seeds.insert(format!("train/split_{k}"), c.stage_seed(SeedStream::Train, &[k as u64]));
            stage_seeds.insert(format!("dropout/split_{k}"), c.stage_seed(SeedStream::Dropout, &[k as u64]));
            stage_seeds.insert(format!("rio/split_{k}"), c.stage_seed(SeedStream::Rio, &[k as u64]));
            let model = MlpModel::load_json(self.split_dir("train", k).join("model.json")).stage(STAGE)?;
            let report: Vec<uqkit::mlp::SearchRow> =
                read_rows(&self.split_dir("train", k).join("search_report.csv"), STAGE)?;
            let best = report.iter().find(|r| r.status == "selected").map_or(0, |r| r.index);
            let mut first_step = BTreeMap::new();
            for name in &curves {
                let curve = uqkit::evaluation::read_removal_curve_csv(
                    self.split_dir("eval", k).join(format!("removal_curve_{name}.csv")),
                )
                .stage(STAGE)?;
                if curve.len() >= 2 {
                    first_step.insert(name.to_string(), [curve[0].r2, curve[1].r2]);
                }
            }
            let nov = novelty.iter().find(|r| r.split == k);
            splits.push(SplitSummary {
                split: k,
                train_cluster: s.train_cluster,
                n_train: s.train_idx.len(),
                n_valid: s.valid_idx.len(),
                n_holdout: s.holdout_idx(&prep.labels).len(),
                n_test: s.test_idx.len(),
                best_candidate: best,
                hidden_sizes: model.hidden_sizes(),
                learning_rate: model.train_config().map_or(f64::NAN, |t| t.learning_rate),
                r2_within: matrix.get(k, k),
                r2_cross_mean: matrix.mean_cross(k),
                ad_dd_median_in: nov.and_then(|r| r.ad_dd_median_in),
                ad_dd_median_out: nov.and_then(|r| r.ad_dd_median_out),
                novel_rate_in: nov.and_then(|r| r.novel_rate_in),
                novel_rate_out: nov.and_then(|r| r.novel_rate_out),
                removal_first_step: first_step,
            });
        }
        let mut cluster_sizes = BTreeMap::new();
        for &l in &prep.labels.labels {
            *cluster_sizes.entry(l).or_insert(0) += 1;
        }
        Ok(Summary {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: c.full_hash(),
            seed: c.seed,
            stage_seeds,
            n_rows: prep.data.n_rows(),
            features: prep.data.feature_names().to_vec(),
            label_source: if c.paths.labels.is_some() { "external" } else { "dbscan" }.to_string(),
            cluster_sizes,
            uq_methods: c.uq.methods.clone(),
            splits,
            r2_matrix: matrix,
            verification,
        })
    }

    /// All stages in order.
    pub fn run_all(&mut self) -> Result<()> {
        if self.cfg.paths.dataset.is_none() {
            self.synth()?;
        }
        self.split()?;
        self.train(None)?;
        self.uq(None, None)?;
        self.eval()?;
        self.report()?;
        Ok(())
    }
}

/// Number of feature columns in the raw table, for logging.
fn schema_width(path: &Path, schema: &CsvSchema) -> Result<usize> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let h = r.headers().stage("split")?;
    Ok(h.iter()
        .filter(|c| *c != schema.id_column && *c != schema.target_column)
        .count())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn print_summary(s: &Summary) {
    println!("clusters: {:?}", s.cluster_sizes);
    println!("split  cluster  R2_within  R2_cross  ADDD_in  ADDD_out");
    for sp in &s.splits {
        println!(
            "{:>5}  {:>7}  {:>9}  {:>8}  {:>7}  {:>8}",
            sp.split,
            sp.train_cluster,
            fmt_opt(sp.r2_within),
            fmt_opt(sp.r2_cross_mean),
            fmt_opt(sp.ad_dd_median_in),
            fmt_opt(sp.ad_dd_median_out)
        );
    }
    println!(
        "verification: {} matrix entries, {} curves, max deviation {:e}",
        s.verification.matrix_entries, s.verification.curves, s.verification.max_abs_deviation
    );
}
