//! Run configuration, read from TOML. Unknown keys are rejected and every
//! field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uqkit::dataset::{CsvSchema, SyntheticConfig, TargetModel};
use uqkit::embedding::TsneConfig;
use uqkit::mlp::{HyperparamGrid, TrainSettings};
use uqkit::rng::derive_seed;
use uqkit::uq::{KernelConfig, Metric, RioSettings};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub features: FeatureSection,
    pub embedding: EmbeddingSection,
    pub clustering: ClusteringSection,
    pub mlp: MlpSection,
    pub uq: UqSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthSection::default(),
            features: FeatureSection::default(),
            embedding: EmbeddingSection::default(),
            clustering: ClusteringSection::default(),
            mlp: MlpSection::default(),
            uq: UqSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Input table. When absent the synthetic dataset under `out` is used.
    pub dataset: Option<PathBuf>,
    /// Precomputed `id,cluster` labels; skips embedding and DBSCAN.
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            labels: None,
            out: PathBuf::from("uqkit-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub clusters: usize,
    pub points_per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub coefficient_scale: f64,
    pub intercept_scale: f64,
    pub noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            clusters: d.clusters,
            points_per_cluster: d.points_per_cluster,
            dim: d.dim,
            separation: d.separation,
            coefficient_scale: d.target.coefficient_scale,
            intercept_scale: d.target.intercept_scale,
            noise: d.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub id_column: String,
    pub target_column: String,
    /// Keep only features with `|r| > threshold` against the target.
    pub correlation_threshold: Option<f64>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let s = CsvSchema::default();
        Self {
            id_column: s.id_column,
            target_column: s.target_column,
            correlation_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub pca_components: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: Option<f64>,
    /// Compute the embedding even when external labels are supplied.
    pub force: bool,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let t = TsneConfig::default();
        Self {
            pca_components: 10,
            perplexity: t.perplexity,
            iterations: t.iterations,
            early_exaggeration: t.early_exaggeration,
            exaggeration_iterations: t.exaggeration_iterations,
            learning_rate: t.learning_rate,
            force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringSection {
    pub eps: f64,
    pub min_pts: usize,
    pub train_n: usize,
    pub valid_n: usize,
    pub min_cluster_size: usize,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        Self {
            eps: 7.0,
            min_pts: 10,
            train_n: 100,
            valid_n: 20,
            min_cluster_size: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSection {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub grid: HyperparamGrid,
}

impl Default for MlpSection {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            grid: HyperparamGrid::default(),
        }
    }
}

impl MlpSection {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UqMethod {
    Dropout,
    Ad,
    Rio,
}

impl UqMethod {
    pub const ALL: [UqMethod; 3] = [UqMethod::Dropout, UqMethod::Ad, UqMethod::Rio];

    pub fn name(self) -> &'static str {
        match self {
            UqMethod::Dropout => "dropout",
            UqMethod::Ad => "ad",
            UqMethod::Rio => "rio",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            UqMethod::Dropout => "uq_dropout.csv",
            UqMethod::Ad => "uq_ad.csv",
            UqMethod::Rio => "uq_rio.csv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqSection {
    pub methods: Vec<UqMethod>,
    pub passes: usize,
    pub k: usize,
    pub metric: Metric,
    pub alpha: f64,
    pub rio: RioSettings,
    /// Starting kernel parameters; derived from the data when absent.
    pub rio_kernel: Option<KernelConfig>,
}

impl Default for UqSection {
    fn default() -> Self {
        Self {
            methods: UqMethod::ALL.to_vec(),
            passes: 100,
            k: 5,
            metric: Metric::Euclidean,
            alpha: 0.05,
            rio: RioSettings::default(),
            rio_kernel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub step_fraction: f64,
    pub min_remaining: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            step_fraction: 0.05,
            min_remaining: 10,
        }
    }
}

/// Keys for per-stage seed derivation.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Synth = 1,
    Tsne = 2,
    Split = 3,
    Train = 4,
    Dropout = 5,
    Rio = 6,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|message| CliError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Canonical text form: every field written out in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Invalid(m));
        if !(self.uq.alpha > 0.0 && self.uq.alpha < 1.0) {
            return bad(format!("uq.alpha must be in (0, 1), got {}", self.uq.alpha));
        }
        if !(self.eval.step_fraction > 0.0 && self.eval.step_fraction < 1.0) {
            return bad(format!("eval.step_fraction must be in (0, 1), got {}", self.eval.step_fraction));
        }
        if self.uq.methods.is_empty() {
            return bad("uq.methods must not be empty".into());
        }
        if self.uq.passes == 0 || self.uq.k == 0 {
            return bad("uq.passes and uq.k must be positive".into());
        }
        if !(self.clustering.eps > 0.0) || self.clustering.min_pts == 0 {
            return bad("clustering.eps and clustering.min_pts must be positive".into());
        }
        if self.embedding.pca_components == 0 {
            return bad("embedding.pca_components must be positive".into());
        }
        if self.mlp.grid.points().is_empty() {
            return bad("mlp.grid is empty".into());
        }
        if !(0.0..1.0).contains(&self.mlp.grid.dropout_rate) {
            return bad(format!("mlp.grid.dropout_rate must be in [0, 1), got {}", self.mlp.grid.dropout_rate));
        }
        if let Some(k) = &self.uq.rio_kernel {
            k.validate().map_err(|e| CliError::Invalid(format!("uq.rio_kernel: {e}")))?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, stream: SeedStream, extra: &[u64]) -> u64 {
        let mut keys = vec![stream as u64];
        keys.extend_from_slice(extra);
        derive_seed(self.seed, &keys)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let s = &self.synth;
        SyntheticConfig {
            clusters: s.clusters,
            points_per_cluster: s.points_per_cluster,
            dim: s.dim,
            separation: s.separation,
            target: TargetModel {
                coefficient_scale: s.coefficient_scale,
                intercept_scale: s.intercept_scale,
            },
            noise: s.noise,
            seed: self.stage_seed(SeedStream::Synth, &[]),
        }
    }

    pub fn tsne(&self) -> TsneConfig {
        let e = &self.embedding;
        TsneConfig {
            perplexity: e.perplexity,
            iterations: e.iterations,
            early_exaggeration: e.early_exaggeration,
            exaggeration_iterations: e.exaggeration_iterations,
            learning_rate: e.learning_rate,
            seed: self.stage_seed(SeedStream::Tsne, &[]),
            ..TsneConfig::default()
        }
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            id_column: self.features.id_column.clone(),
            target_column: self.features.target_column.clone(),
        }
    }

    /// SHA-256 over the canonical JSON of `parts`.
    pub fn hash_of<T: Serialize>(parts: &T) -> String {
        let json = serde_json::to_vec(parts).expect("config parts serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of the canonical text with the output directory cleared, so a
    /// run's identity does not depend on where it is written.
    pub fn full_hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}
