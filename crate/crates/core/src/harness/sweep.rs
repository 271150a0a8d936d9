//! Parameter sweeps over `k_db`, `k_train` and `tau`.
//!
//! Each sweep compares a zero-shot baseline (raw embeddings, seen-mode
//! split) against heads trained under the seen and the unseen protocol,
//! with and without mean aggregation. Replicate `r` uses root seed
//! `base.seed + r` and, for synthetic data, data seed `data.seed + r`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_split, config_err, evaluate_split, load_data, represent, Aggregation, AtStage,
    DataSource, EncoderStage, ExperimentConfig, Result, Stage,
};
use crate::io::write_atomic;
use crate::metrics::MetricSummary;
use crate::store::{Dataset, SplitMode, SplitSpec};
use crate::trainer::{train, HeadParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    KDb,
    KTrain,
    Tau,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::KDb => "k_db",
            Axis::KTrain => "k_train",
            Axis::Tau => "tau",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderCondition {
    ZeroShot,
    TrainedSeen,
    TrainedUnseen,
}

impl EncoderCondition {
    pub fn name(self) -> &'static str {
        match self {
            EncoderCondition::ZeroShot => "zero_shot",
            EncoderCondition::TrainedSeen => "trained_seen",
            EncoderCondition::TrainedUnseen => "trained_unseen",
        }
    }

    fn mode(self) -> SplitMode {
        match self {
            EncoderCondition::TrainedUnseen => SplitMode::Unseen,
            _ => SplitMode::Seen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub encoder: EncoderCondition,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub replicate: usize,
    pub condition: Condition,
    #[serde(flatten)]
    pub summary: MetricSummary,
}

/// A split used during a sweep, kept for invariant checks.
#[derive(Debug, Clone)]
pub struct SweepSplit {
    pub value: f64,
    pub replicate: usize,
    pub split: SplitSpec,
}

/// Mean and sample standard deviation over replicates at one axis value.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub value: f64,
    pub n: usize,
    pub mrr: (f64, f64),
    pub recall: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub ks: Vec<usize>,
    /// Root seed of each replicate.
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    pub points: Vec<SweepPoint>,
    #[serde(skip)]
    pub splits: Vec<SweepSplit>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

impl SweepResult {
    pub fn points_for(
        &self,
        condition: Condition,
        value: f64,
    ) -> impl Iterator<Item = &SweepPoint> {
        self.points
            .iter()
            .filter(move |p| p.condition == condition && p.value == value)
    }

    /// Per-value aggregate over replicates for one condition.
    pub fn series(&self, condition: Condition) -> Vec<SeriesPoint> {
        self.values
            .iter()
            .map(|&value| {
                let pts: Vec<&SweepPoint> = self.points_for(condition, value).collect();
                let mrr: Vec<f64> = pts.iter().map(|p| p.summary.mrr).collect();
                let recall = self
                    .ks
                    .iter()
                    .map(|&k| {
                        let r: Vec<f64> =
                            pts.iter().filter_map(|p| p.summary.recall_at(k)).collect();
                        mean_std(&r)
                    })
                    .collect();
                SeriesPoint {
                    value,
                    n: pts.len(),
                    mrr: mean_std(&mrr),
                    recall,
                }
            })
            .collect()
    }

    /// Replicate-mean recall@k at each axis value.
    pub fn recall_curve(&self, condition: Condition, k: usize) -> Vec<f64> {
        let Some(pos) = self.ks.iter().position(|&x| x == k) else {
            return Vec::new();
        };
        self.series(condition)
            .iter()
            .map(|s| s.recall[pos].0)
            .collect()
    }

    pub fn mrr_curve(&self, condition: Condition) -> Vec<f64> {
        self.series(condition).iter().map(|s| s.mrr.0).collect()
    }

    /// One row per axis value and condition: replicate count, then mean and
    /// standard deviation of MRR and each recall@k.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},encoder,aggregation,n_seeds,mrr_mean,mrr_std",
            self.axis.name()
        );
        for k in &self.ks {
            let _ = write!(out, ",recall@{k}_mean,recall@{k}_std");
        }
        out.push('\n');
        for &c in &self.conditions {
            for s in self.series(c) {
                let agg = match c.aggregation {
                    Aggregation::None => "none",
                    Aggregation::Mean => "mean",
                };
                let _ = write!(
                    out,
                    "{},{},{},{},{},{}",
                    s.value,
                    c.encoder.name(),
                    agg,
                    s.n,
                    s.mrr.0,
                    s.mrr.1
                );
                for (m, sd) in &s.recall {
                    let _ = write!(out, ",{m},{sd}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep result serialises")
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).at(Stage::Persist)?;
        write_atomic(&dir.join(format!("{stem}.json")), self.to_json().as_bytes())
            .at(Stage::Persist)?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes()).at(Stage::Persist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: Axis,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub seeds: usize,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(Stage::Config)?;
        let mut spec: Self = serde_json::from_str(&text).at(Stage::Config)?;
        if let Some(base) = path.parent() {
            spec.base.resolve_paths(base);
        }
        Ok(spec)
    }
}

/// Runs the sweep described by `spec`.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult> {
    let counts = || -> Result<Vec<usize>> {
        spec.values
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v >= 0.0 && v <= usize::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(config_err("values", format!("{v} is not a view count")))
                }
            })
            .collect()
    };
    match spec.axis {
        Axis::KDb => sweep_kdb(&spec.base, &counts()?, spec.seeds),
        Axis::KTrain => sweep_ktrain(&spec.base, &counts()?, spec.seeds),
        Axis::Tau => sweep_tau(&spec.base, &spec.values, spec.seeds),
    }
}

const AGGREGATIONS: [Aggregation; 2] = [Aggregation::None, Aggregation::Mean];

fn conditions(encoders: &[EncoderCondition]) -> Vec<Condition> {
    encoders
        .iter()
        .flat_map(|&encoder| {
            AGGREGATIONS.map(|aggregation| Condition {
                encoder,
                aggregation,
            })
        })
        .collect()
}

fn replicate(base: &ExperimentConfig, r: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.seed = base.seed.wrapping_add(r as u64);
    if let DataSource::Synth(p) = &mut cfg.data {
        p.seed = p.seed.wrapping_add(r as u64);
    }
    cfg.split.file = None;
    cfg.output_dir = None;
    cfg
}

fn with_split(
    cfg: &ExperimentConfig,
    k_train: usize,
    k_db: usize,
    mode: SplitMode,
) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.split.k_train = k_train;
    c.split.k_db = k_db;
    c.split.mode = mode;
    c
}

fn check_common(base: &ExperimentConfig, values_empty: bool, seeds: usize) -> Result<()> {
    base.validate()?;
    if base.split.file.is_some() {
        return Err(config_err("split.file", "sweeps sample their own splits"));
    }
    if values_empty {
        return Err(config_err("values", "at least one sweep value is required"));
    }
    if seeds == 0 {
        return Err(config_err("seeds", "at least one replicate is required"));
    }
    Ok(())
}

fn base_train_config(base: &ExperimentConfig, axis: &str) -> Result<TrainConfig> {
    match &base.encoder {
        EncoderStage::Trained(t) => Ok(t.clone()),
        EncoderStage::Raw => Err(config_err(
            "encoder",
            format!("a {axis} sweep trains heads and needs encoder.stage = \"trained\""),
        )),
    }
}

/// Evaluates every aggregation for one encoder condition and records the split.
struct Collector<'a> {
    cfg: &'a ExperimentConfig,
    replicate: usize,
    points: Vec<SweepPoint>,
    splits: Vec<SweepSplit>,
}

impl<'a> Collector<'a> {
    fn new(cfg: &'a ExperimentConfig, replicate: usize) -> Self {
        Self {
            cfg,
            replicate,
            points: Vec::new(),
            splits: Vec::new(),
        }
    }

    fn eval(
        &mut self,
        rep: &Dataset,
        split: &SplitSpec,
        value: f64,
        encoder: EncoderCondition,
    ) -> Result<()> {
        for aggregation in AGGREGATIONS {
            let report = evaluate_split(
                rep,
                split,
                aggregation,
                self.cfg.mean_order,
                &self.cfg.ks,
                self.cfg.recall_mode,
            )?;
            self.points.push(SweepPoint {
                value,
                replicate: self.replicate,
                condition: Condition {
                    encoder,
                    aggregation,
                },
                summary: report.summary(),
            });
        }
        self.splits.push(SweepSplit {
            value,
            replicate: self.replicate,
            split: split.clone(),
        });
        Ok(())
    }
}

/// Trains on `split` and returns the head-mapped records needed by `split`
/// and by any split whose database is a subset of it.
fn trained_representation(
    data: &Dataset,
    split: &SplitSpec,
    train_config: &TrainConfig,
) -> Result<Dataset> {
    let head: HeadParams = train(data, split, train_config).at(Stage::Train)?.head;
    let wanted: std::collections::HashSet<(&str, &str)> =
        split.db_keys().chain(split.query_keys()).collect();
    represent(data, Some(&head), |s, v| wanted.contains(&(s, v)))
}

fn assemble(
    axis: Axis,
    values: Vec<f64>,
    base: &ExperimentConfig,
    seeds: usize,
    encoders: &[EncoderCondition],
    per_replicate: Vec<(Vec<SweepPoint>, Vec<SweepSplit>)>,
) -> SweepResult {
    let conditions = conditions(encoders);
    let mut points = Vec::new();
    let mut splits = Vec::new();
    for (p, s) in per_replicate {
        points.extend(p);
        splits.extend(s);
    }
    // Stable order: condition, value, replicate.
    let cpos = |c: &Condition| conditions.iter().position(|x| x == c).unwrap_or(usize::MAX);
    let vpos = |v: f64| values.iter().position(|&x| x == v).unwrap_or(usize::MAX);
    points.sort_by_key(|p| (cpos(&p.condition), vpos(p.value), p.replicate));
    SweepResult {
        axis,
        ks: base.ks.clone(),
        seeds: (0..seeds)
            .map(|r| base.seed.wrapping_add(r as u64))
            .collect(),
        conditions,
        points,
        splits,
        values,
    }
}

/// Recall and MRR as the database grows from `values[0]` to `max(values)`
/// views per scene. Heads are trained once per protocol and replicate; the
/// query and training views do not depend on `k_db`.
pub fn sweep_kdb(base: &ExperimentConfig, values: &[usize], seeds: usize) -> Result<SweepResult> {
    check_common(base, values.is_empty(), seeds)?;
    if values.contains(&0) {
        return Err(config_err("values", "k_db must be at least 1"));
    }
    let train_config = match &base.encoder {
        EncoderStage::Trained(t) => Some(t.clone()),
        EncoderStage::Raw => None,
    };
    let encoders: Vec<EncoderCondition> = if train_config.is_some() {
        vec![
            EncoderCondition::ZeroShot,
            EncoderCondition::TrainedSeen,
            EncoderCondition::TrainedUnseen,
        ]
    } else {
        vec![EncoderCondition::ZeroShot]
    };
    let k_max = *values.iter().max().expect("non-empty");
    let k_train = base.split.k_train;

    let per_replicate = (0..seeds)
        .into_par_iter()
        .map(|r| {
            let cfg = replicate(base, r);
            let data = load_data(&cfg.data)?;
            let mut out = Collector::new(&cfg, r);
            for &enc in &encoders {
                let rep = match (&train_config, enc) {
                    (_, EncoderCondition::ZeroShot) => None,
                    (Some(t), _) => {
                        let full =
                            build_split(&with_split(&cfg, k_train, k_max, enc.mode()), &data)?;
                        let t = TrainConfig {
                            seed: cfg.train_seed(),
                            ..t.clone()
                        };
                        Some(trained_representation(&data, &full, &t)?)
                    }
                    (None, _) => unreachable!("trained conditions need a train config"),
                };
                for &v in values {
                    let split = build_split(&with_split(&cfg, k_train, v, enc.mode()), &data)?;
                    out.eval(rep.as_ref().unwrap_or(&data), &split, v as f64, enc)?;
                }
            }
            Ok((out.points, out.splits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        Axis::KDb,
        values.iter().map(|&v| v as f64).collect(),
        base,
        seeds,
        &encoders,
        per_replicate,
    ))
}

const TRAINED: [EncoderCondition; 3] = [
    EncoderCondition::ZeroShot,
    EncoderCondition::TrainedSeen,
    EncoderCondition::TrainedUnseen,
];

/// Shared driver for sweeps that retrain at every value. `setup` maps a
/// value to the split's `k_train` and the training config to use.
fn retraining_sweep(
    axis: Axis,
    base: &ExperimentConfig,
    values: &[f64],
    seeds: usize,
    setup: impl Fn(f64, &TrainConfig) -> (usize, TrainConfig) + Sync,
) -> Result<SweepResult> {
    let train_config = base_train_config(base, axis.name())?;
    let k_db = base.split.k_db;
    let per_replicate = (0..seeds)
        .into_par_iter()
        .map(|r| {
            let cfg = replicate(base, r);
            let data = load_data(&cfg.data)?;
            let mut out = Collector::new(&cfg, r);
            // The zero-shot baseline does not depend on the axis.
            let zs_split = build_split(
                &with_split(&cfg, cfg.split.k_train, k_db, SplitMode::Seen),
                &data,
            )?;
            for &v in values {
                out.eval(&data, &zs_split, v, EncoderCondition::ZeroShot)?;
            }
            let jobs: Vec<(f64, EncoderCondition)> = values
                .iter()
                .flat_map(|&v| {
                    [
                        (v, EncoderCondition::TrainedSeen),
                        (v, EncoderCondition::TrainedUnseen),
                    ]
                })
                .collect();
            let trained = jobs
                .par_iter()
                .map(|&(v, enc)| {
                    let (k_train, t) = setup(v, &train_config);
                    let split = build_split(&with_split(&cfg, k_train, k_db, enc.mode()), &data)?;
                    let t = TrainConfig {
                        seed: cfg.train_seed(),
                        ..t
                    };
                    let rep = trained_representation(&data, &split, &t)?;
                    let mut c = Collector::new(&cfg, r);
                    c.eval(&rep, &split, v, enc)?;
                    Ok((c.points, c.splits))
                })
                .collect::<Result<Vec<_>>>()?;
            for (p, s) in trained {
                out.points.extend(p);
                out.splits.extend(s);
            }
            Ok((out.points, out.splits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        axis,
        values.to_vec(),
        base,
        seeds,
        &TRAINED,
        per_replicate,
    ))
}

/// Retrains with `k_train` training views per scene at each value; the
/// database size stays at `base.split.k_db`.
pub fn sweep_ktrain(
    base: &ExperimentConfig,
    values: &[usize],
    seeds: usize,
) -> Result<SweepResult> {
    check_common(base, values.is_empty(), seeds)?;
    if let Some(v) = values.iter().find(|&&v| v < 2) {
        return Err(config_err(
            "values",
            format!("k_train = {v}; a positive pair needs at least 2 training views per scene"),
        ));
    }
    let as_f64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    retraining_sweep(Axis::KTrain, base, &as_f64, seeds, |v, t| {
        (v as usize, t.clone())
    })
}

/// Retrains with each temperature.
pub fn sweep_tau(base: &ExperimentConfig, values: &[f64], seeds: usize) -> Result<SweepResult> {
    check_common(base, values.is_empty(), seeds)?;
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(config_err("values", format!("tau = {v} must be positive")));
    }
    let k_train = base.split.k_train;
    retraining_sweep(Axis::Tau, base, values, seeds, |v, t| {
        (
            k_train,
            TrainConfig {
                tau: v,
                ..t.clone()
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SplitConfig;
    use crate::store::SynthParams;

    fn base(trained: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(
            DataSource::Synth(SynthParams {
                n_scenes: 12,
                views_per_scene: 10,
                dim: 12,
                sigma: 1.0,
                nuisance_dims: 6,
                seed: 1,
            }),
            SplitConfig {
                k_train: 3,
                k_db: 2,
                k_query: 1,
                mode: SplitMode::Seen,
                file: None,
            },
        );
        if trained {
            cfg.encoder = EncoderStage::Trained(TrainConfig {
                epochs: 3,
                batch_scenes: 4,
                hidden_width: 8,
                representation_dim: 6,
                projection_dim: 4,
                ..TrainConfig::default()
            });
        }
        cfg
    }

    #[test]
    fn kdb_sweep_shape_and_csv() {
        let res = sweep_kdb(&base(true), &[1, 2, 4], 2).unwrap();
        assert_eq!(res.conditions.len(), 6);
        assert_eq!(res.points.len(), 6 * 3 * 2);
        let csv = res.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "k_db,encoder,aggregation,n_seeds,mrr_mean,mrr_std,recall@1_mean,recall@1_std,recall@5_mean,recall@5_std"
        );
        assert_eq!(lines.len(), 1 + 6 * 3);
        assert!(lines[1].starts_with("1,zero_shot,none,2,"));
    }

    #[test]
    fn kdb_sweep_raw_has_only_zero_shot() {
        let res = sweep_kdb(&base(false), &[1, 3], 1).unwrap();
        assert_eq!(res.conditions.len(), 2);
        assert!(res
            .points
            .iter()
            .all(|p| p.condition.encoder == EncoderCondition::ZeroShot));
    }

    #[test]
    fn kdb_sweep_databases_are_nested() {
        let res = sweep_kdb(&base(true), &[1, 2, 5], 1).unwrap();
        for mode in [SplitMode::Seen, SplitMode::Unseen] {
            let ours: Vec<&SweepSplit> =
                res.splits.iter().filter(|s| s.split.mode == mode).collect();
            for w in ours.windows(2) {
                let (a, b) = (&w[0].split, &w[1].split);
                if a.mode != b.mode || w[0].value > w[1].value {
                    continue;
                }
                for (sa, sb) in a.scenes.iter().zip(&b.scenes) {
                    assert!(sa.db_views.iter().all(|v| sb.db_views.contains(v)));
                    assert_eq!(sa.query_views, sb.query_views);
                    assert_eq!(sa.train_views, sb.train_views);
                }
            }
        }
    }

    #[test]
    fn sweeps_are_deterministic() {
        let a = sweep_kdb(&base(true), &[1, 2], 2).unwrap();
        let b = sweep_kdb(&base(true), &[1, 2], 2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn invalid_values_rejected() {
        assert_eq!(
            sweep_kdb(&base(true), &[0, 1], 1).unwrap_err().stage,
            Stage::Config
        );
        let e = sweep_ktrain(&base(true), &[1, 2], 1).unwrap_err();
        assert!(e.to_string().contains("positive pair"), "{e}");
        assert!(sweep_tau(&base(true), &[0.0], 1).is_err());
        assert!(sweep_tau(&base(false), &[0.5], 1).is_err());
        assert!(sweep_kdb(&base(true), &[], 1).is_err());
        assert!(sweep_kdb(&base(true), &[1], 0).is_err());
    }

    #[test]
    fn ktrain_baseline_is_constant() {
        let res = sweep_ktrain(&base(true), &[2, 4], 1).unwrap();
        let zs = Condition {
            encoder: EncoderCondition::ZeroShot,
            aggregation: Aggregation::None,
        };
        let curve = res.mrr_curve(zs);
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0], curve[1]);
        assert_eq!(res.points.len(), 6 * 2);
    }

    #[test]
    fn tau_sweep_runs() {
        let res = sweep_tau(&base(true), &[0.1, 1.0], 1).unwrap();
        assert_eq!(res.values, vec![0.1, 1.0]);
        assert!(res.to_csv().starts_with("tau,"));
    }

    #[test]
    fn sweep_spec_parses_integer_values() {
        let spec = SweepSpec {
            base: base(false),
            axis: Axis::KDb,
            values: vec![1.0, 2.5],
            seeds: 1,
        };
        assert_eq!(sweep(&spec).unwrap_err().stage, Stage::Config);
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }
}
