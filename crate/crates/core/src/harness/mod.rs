//! Config-driven experiments.
//!
//! A run goes through fixed stages: load data, split, (train), represent,
//! index, evaluate, persist. Every failure is tagged with its stage. All
//! randomness is derived from the config's root `seed`: the split seed and
//! the training seed (which in turn seeds initialisation and batch
//! shuffling) are separate child streams.

mod export;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{Index, MeanOrder, Selector};
use crate::io::write_atomic;
use crate::metrics::{evaluate, MetricReport, Query, RecallMode};
use crate::seed;
use crate::store::{
    make_split, synth_generate, AccessMode, Dataset, EmbeddingRecord, SplitMode, SplitParams,
    SplitSpec, SynthParams,
};
use crate::trainer::{save_checkpoint, train, HeadParams, TrainConfig, TrainOutcome};

pub use export::{export_embeddings, ExportStage, ExportSummary, ROLES_FILE};
pub use sweep::{
    sweep, sweep_kdb, sweep_ktrain, sweep_tau, Axis, Condition, EncoderCondition, SeriesPoint,
    SweepPoint, SweepResult, SweepSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Split,
    Train,
    Represent,
    Index,
    Evaluate,
    Persist,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Represent => "represent",
            Stage::Index => "index",
            Stage::Evaluate => "evaluate",
            Stage::Persist => "persist",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct ExperimentError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| ExperimentError {
            stage,
            source: Box::new(e),
        })
    }
}

fn config_err(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError {
        stage: Stage::Config,
        source: Box::new(ConfigError::new(field, message)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path {
        path: PathBuf,
        #[serde(default = "default_access")]
        access: AccessMode,
    },
    Synth(SynthParams),
}

fn default_access() -> AccessMode {
    AccessMode::Eager
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub k_train: usize,
    pub k_db: usize,
    #[serde(default = "one")]
    pub k_query: usize,
    #[serde(default = "default_mode")]
    pub mode: SplitMode,
    /// Use this split file instead of sampling one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn default_mode() -> SplitMode {
    SplitMode::Seen
}

impl SplitConfig {
    pub fn params(&self) -> SplitParams {
        SplitParams {
            k_train: self.k_train,
            k_db: self.k_db,
            k_query: self.k_query,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", content = "train", rename_all = "snake_case")]
pub enum EncoderStage {
    /// Frozen encoder embeddings as stored.
    Raw,
    /// Embeddings passed through a contrastively trained head.
    Trained(TrainConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    None,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    /// Root seed for split sampling and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "raw_stage")]
    pub encoder: EncoderStage,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_mean_order")]
    pub mean_order: MeanOrder,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub recall_mode: RecallMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn raw_stage() -> EncoderStage {
    EncoderStage::Raw
}

fn default_mean_order() -> MeanOrder {
    MeanOrder::NormalizeThenMean
}

fn default_ks() -> Vec<usize> {
    vec![1, 5]
}

impl ExperimentConfig {
    /// A raw-encoder config with default metrics settings.
    pub fn new(data: DataSource, split: SplitConfig) -> Self {
        Self {
            data,
            split,
            seed: 0,
            encoder: EncoderStage::Raw,
            aggregation: Aggregation::None,
            mean_order: default_mean_order(),
            ks: default_ks(),
            recall_mode: RecallMode::Hit,
            output_dir: None,
        }
    }

    /// Reads a JSON config. Relative paths inside it are resolved against the
    /// config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(Stage::Config)?;
        let mut cfg: Self = serde_json::from_str(&text).at(Stage::Config)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub(crate) fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Path { path, .. } = &mut self.data {
            fix(path);
        }
        if let Some(f) = &mut self.split.file {
            fix(f);
        }
        if let Some(o) = &mut self.output_dir {
            fix(o);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(config_err("ks", "at least one recall cutoff is required"));
        }
        if self.ks.contains(&0) {
            return Err(config_err("ks", "recall cutoffs must be at least 1"));
        }
        if self.split.file.is_none() {
            if self.split.k_db == 0 {
                return Err(config_err("split.k_db", "must be at least 1"));
            }
            if self.split.k_query == 0 {
                return Err(config_err("split.k_query", "must be at least 1"));
            }
        }
        if let EncoderStage::Trained(t) = &self.encoder {
            if self.split.file.is_none() && self.split.k_train < 2 {
                return Err(config_err(
                    "split.k_train",
                    format!(
                        "is {}; a positive pair needs at least 2 training views per scene",
                        self.split.k_train
                    ),
                ));
            }
            t.validate()
                .map_err(|e| config_err("encoder.train", e.to_string()))?;
        }
        if let DataSource::Synth(p) = &self.data {
            if p.nuisance_dims >= p.dim {
                return Err(config_err(
                    "data.nuisance_dims",
                    "must be smaller than data.dim",
                ));
            }
            if !(p.sigma.is_finite() && p.sigma >= 0.0) {
                return Err(config_err("data.sigma", "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, "split")
    }

    pub fn train_seed(&self) -> u64 {
        seed::derive(self.seed, "train")
    }

    /// Training config with the seed taken from the root seed hierarchy.
    pub fn effective_train_config(&self) -> Option<TrainConfig> {
        match &self.encoder {
            EncoderStage::Raw => None,
            EncoderStage::Trained(t) => Some(TrainConfig {
                seed: self.train_seed(),
                ..t.clone()
            }),
        }
    }
}

pub fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Path { path, access } => Dataset::open(path, *access).at(Stage::Data),
        DataSource::Synth(p) => {
            let recs = synth_generate(p).at(Stage::Data)?;
            Dataset::from_records(&recs).at(Stage::Data)
        }
    }
}

pub fn build_split(config: &ExperimentConfig, dataset: &Dataset) -> Result<SplitSpec> {
    let split = match &config.split.file {
        Some(f) => SplitSpec::load(f).at(Stage::Split)?,
        None => make_split(
            dataset.manifest(),
            config.split.params(),
            config.split_seed(),
        )
        .at(Stage::Split)?,
    };
    split.check_against(dataset.manifest()).at(Stage::Split)?;
    Ok(split)
}

/// Records of `dataset` selected by `keep`, mapped through `head` when given,
/// as an in-memory dataset (manifest order preserved).
pub(crate) fn represent(
    dataset: &Dataset,
    head: Option<&HeadParams>,
    keep: impl Fn(&str, &str) -> bool,
) -> Result<Dataset> {
    let mut recs = Vec::new();
    let mut failure = None;
    dataset
        .for_each_record(|_, s, v, x| {
            if keep(s, v) {
                let vector = match head {
                    Some(h) => match h.embed(x) {
                        Ok(r) => r,
                        Err(e) => {
                            failure.get_or_insert(e);
                            return Ok(());
                        }
                    },
                    None => x.to_vec(),
                };
                recs.push(EmbeddingRecord::new(s, v, vector));
            }
            Ok(())
        })
        .at(Stage::Represent)?;
    if let Some(e) = failure {
        return Err(e).at(Stage::Represent);
    }
    Dataset::from_records(&recs).at(Stage::Represent)
}

/// Builds the database index for `split` over `dataset` (already in the
/// active representation) and evaluates its queries.
pub fn evaluate_split(
    dataset: &Dataset,
    split: &SplitSpec,
    aggregation: Aggregation,
    mean_order: MeanOrder,
    ks: &[usize],
    recall_mode: RecallMode,
) -> Result<MetricReport> {
    let selector = Selector::db_views(split);
    let index = match aggregation {
        Aggregation::None => Index::build(dataset, &selector),
        Aggregation::Mean => Index::build_scene_level(dataset, &selector, mean_order),
    }
    .at(Stage::Index)?;
    let queries = split
        .query_keys()
        .map(|(s, v)| {
            Ok(Query {
                id: format!("{s}/{v}"),
                gt_scene: s.to_string(),
                vector: dataset.vector_by_key(s, v)?.into_owned(),
            })
        })
        .collect::<std::result::Result<Vec<_>, crate::store::StoreError>>()
        .at(Stage::Evaluate)?;
    evaluate(&index, &queries, ks, recall_mode).at(Stage::Evaluate)
}

/// Evaluates `split` with the encoder given by `head` (raw when `None`).
pub(crate) fn evaluate_with_head(
    dataset: &Dataset,
    split: &SplitSpec,
    head: Option<&HeadParams>,
    aggregation: Aggregation,
    mean_order: MeanOrder,
    ks: &[usize],
    recall_mode: RecallMode,
) -> Result<MetricReport> {
    match head {
        None => evaluate_split(dataset, split, aggregation, mean_order, ks, recall_mode),
        Some(h) => {
            let wanted: std::collections::HashSet<(&str, &str)> =
                split.db_keys().chain(split.query_keys()).collect();
            let rep = represent(dataset, Some(h), |s, v| wanted.contains(&(s, v)))?;
            evaluate_split(&rep, split, aggregation, mean_order, ks, recall_mode)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub split: SplitSpec,
    pub training: Option<TrainOutcome>,
    pub report: MetricReport,
}

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "head.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_STEM: &str = "report";

/// Runs one experiment end to end and, when `output_dir` is set, writes the
/// config, split, checkpoint, loss trajectory and report there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dataset = load_data(&config.data)?;
    let split = build_split(config, &dataset)?;
    let train_config = config.effective_train_config();
    let training = match &train_config {
        Some(t) => Some(train(&dataset, &split, t).at(Stage::Train)?),
        None => None,
    };
    let report = evaluate_with_head(
        &dataset,
        &split,
        training.as_ref().map(|t| &t.head),
        config.aggregation,
        config.mean_order,
        &config.ks,
        config.recall_mode,
    )?;
    let outcome = ExperimentOutcome {
        config: config.clone(),
        split,
        training,
        report,
    };
    if let Some(dir) = &config.output_dir {
        persist(dir, &outcome, train_config.as_ref())?;
    }
    Ok(outcome)
}

/// The output directory is left out so the file is identical wherever the
/// run was written.
fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let stored = ExperimentConfig {
        output_dir: None,
        ..config.clone()
    };
    let bytes = serde_json::to_vec_pretty(&stored).at(Stage::Persist)?;
    write_atomic(&dir.join(CONFIG_FILE), &bytes).at(Stage::Persist)
}

fn persist(
    dir: &Path,
    outcome: &ExperimentOutcome,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    std::fs::create_dir_all(dir).at(Stage::Persist)?;
    write_config(dir, &outcome.config)?;
    outcome
        .split
        .save(dir.join(SPLIT_FILE))
        .at(Stage::Persist)?;
    if let Some(t) = &outcome.training {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &t.head, train_config).at(Stage::Persist)?;
        write_atomic(&dir.join(LOSS_FILE), t.trajectory_csv().as_bytes()).at(Stage::Persist)?;
    }
    outcome.report.write(dir, REPORT_STEM).at(Stage::Persist)
}

/// Trains a head only (no evaluation) and persists split, checkpoint and loss
/// trajectory when `output_dir` is set.
pub fn run_training(config: &ExperimentConfig) -> Result<(SplitSpec, TrainOutcome)> {
    config.validate()?;
    let train_config = config
        .effective_train_config()
        .ok_or_else(|| config_err("encoder", "training needs encoder.stage = \"trained\""))?;
    let dataset = load_data(&config.data)?;
    let split = build_split(config, &dataset)?;
    let outcome = train(&dataset, &split, &train_config).at(Stage::Train)?;
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).at(Stage::Persist)?;
        write_config(dir, config)?;
        split.save(dir.join(SPLIT_FILE)).at(Stage::Persist)?;
        save_checkpoint(
            &dir.join(CHECKPOINT_FILE),
            &outcome.head,
            Some(&train_config),
        )
        .at(Stage::Persist)?;
        write_atomic(&dir.join(LOSS_FILE), outcome.trajectory_csv().as_bytes())
            .at(Stage::Persist)?;
    }
    Ok((split, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(sigma: f64) -> DataSource {
        DataSource::Synth(SynthParams {
            n_scenes: 20,
            views_per_scene: 8,
            dim: 16,
            sigma,
            nuisance_dims: 8,
            seed: 3,
        })
    }

    fn split(k_db: usize) -> SplitConfig {
        SplitConfig {
            k_train: 2,
            k_db,
            k_query: 1,
            mode: SplitMode::Seen,
            file: None,
        }
    }

    #[test]
    fn perfect_data_zero_shot() {
        let out = run_experiment(&ExperimentConfig::new(synth(0.0), split(3))).unwrap();
        assert_eq!(out.report.mrr, 1.0);
        assert_eq!(out.report.recall_at(1), Some(1.0));
        assert_eq!(out.report.query_count, 20);
    }

    #[test]
    fn mean_with_single_view_matches_unaggregated() {
        let base = ExperimentConfig::new(synth(1.0), split(1));
        let agg = ExperimentConfig {
            aggregation: Aggregation::Mean,
            ..base.clone()
        };
        let a = run_experiment(&base).unwrap().report;
        let b = run_experiment(&agg).unwrap().report;
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = ExperimentConfig::new(synth(0.0), split(2));
        cfg.encoder = EncoderStage::Trained(TrainConfig::default());
        cfg.split.k_train = 1;
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        let msg = err.to_string();
        assert!(
            msg.contains("split.k_train") && msg.contains("positive pair"),
            "{msg}"
        );

        let mut cfg = ExperimentConfig::new(synth(0.0), split(2));
        cfg.ks = vec![1, 0];
        assert!(run_experiment(&cfg).unwrap_err().to_string().contains("ks"));
    }

    #[test]
    fn failures_name_the_stage() {
        let cfg = ExperimentConfig::new(synth(0.0), split(50));
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Split);
        assert!(err.to_string().starts_with("split stage failed"));

        let cfg = ExperimentConfig::new(
            DataSource::Path {
                path: "/nonexistent/dataset".into(),
                access: AccessMode::Eager,
            },
            split(2),
        );
        assert_eq!(run_experiment(&cfg).unwrap_err().stage, Stage::Data);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let text = r#"{
            "data": {"kind": "synth", "n_scenes": 4, "views_per_scene": 3, "dim": 8,
                     "sigma": 0.0, "nuisance_dims": 4, "seed": 1},
            "split": {"k_db": 2},
            "encoder": {"stage": "trained", "train": {"epochs": 3, "batch_scenes": 2}}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.ks, vec![1, 5]);
        assert_eq!(cfg.split.k_query, 1);
        match &cfg.encoder {
            EncoderStage::Trained(t) => assert_eq!((t.epochs, t.tau), (3, 0.5)),
            _ => panic!(),
        }
        let again: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        let bad = text.replace("\"k_db\": 2", "\"k_db\": 2, \"bogus\": 1");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn seed_streams_are_separate() {
        let cfg = ExperimentConfig::new(synth(0.0), split(2));
        assert_ne!(cfg.split_seed(), cfg.train_seed());
    }
}
