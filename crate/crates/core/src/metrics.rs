//! Retrieval scoring: MRR@k and Recall@k, averaged over queries.

use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{Index, IndexError, RankedResult};
use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ranking is empty")]
    EmptyRanking,
    #[error("no queries")]
    NoQueries,
    #[error("recall cutoff k must be at least 1")]
    ZeroK,
    #[error("query {query}: {source}")]
    Index {
        query: String,
        #[source]
        source: IndexError,
    },
    #[error("writing report: {0}")]
    Io(#[from] io::Error),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing report: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rank cutoff for MRR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cutoff {
    At(usize),
    /// Rank over the whole index.
    #[default]
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// 1 if any of the top k entries is from the ground-truth scene.
    #[default]
    Hit,
    /// Share of the top k entries that are from the ground-truth scene.
    Fraction,
}

/// 1-based position of the first entry from `gt_scene`.
pub fn first_hit_rank(ranked: &RankedResult, gt_scene: &str) -> Option<usize> {
    ranked.scenes().position(|s| s == gt_scene).map(|p| p + 1)
}

pub fn mrr(ranked: &RankedResult, gt_scene: &str, k: Cutoff) -> Result<f64> {
    if ranked.is_empty() {
        return Err(MetricsError::EmptyRanking);
    }
    Ok(match (first_hit_rank(ranked, gt_scene), k) {
        (Some(r), Cutoff::At(k)) if r <= k => 1.0 / r as f64,
        (Some(r), Cutoff::Infinite) => 1.0 / r as f64,
        _ => 0.0,
    })
}

pub fn recall_at_k(
    ranked: &RankedResult,
    gt_scene: &str,
    k: usize,
    mode: RecallMode,
) -> Result<f64> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let hits = ranked.scenes().take(k).filter(|&s| s == gt_scene).count();
    Ok(match mode {
        RecallMode::Hit => f64::from(u8::from(hits > 0)),
        RecallMode::Fraction => hits as f64 / k as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub gt_scene: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub gt_scene: String,
    pub first_hit_rank: Option<usize>,
    pub reciprocal_rank: f64,
    /// One value per requested k, in the report's `ks` order.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_mode: RecallMode,
    pub query_count: usize,
    pub index_size: usize,
    pub mrr: f64,
    pub recall: Vec<RecallAtK>,
    pub rows: Vec<QueryRow>,
}

/// Mean with the summands sorted first, so the result does not depend on the
/// order queries were supplied in.
fn canonical_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    v.into_iter().sum::<f64>() / n as f64
}

/// Ranks every query against the full index and scores MRR (k = ∞) and
/// Recall@k for each k in `ks`.
pub fn evaluate(
    index: &Index,
    queries: &[Query],
    ks: &[usize],
    mode: RecallMode,
) -> Result<MetricReport> {
    if queries.is_empty() {
        return Err(MetricsError::NoQueries);
    }
    if ks.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    let rows = queries
        .par_iter()
        .map(|q| {
            let ranked = index
                .full_ranking(&q.vector)
                .map_err(|e| MetricsError::Index {
                    query: q.id.clone(),
                    source: e,
                })?;
            let recall = ks
                .iter()
                .map(|&k| recall_at_k(&ranked, &q.gt_scene, k, mode))
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryRow {
                query_id: q.id.clone(),
                gt_scene: q.gt_scene.clone(),
                first_hit_rank: first_hit_rank(&ranked, &q.gt_scene),
                reciprocal_rank: mrr(&ranked, &q.gt_scene, Cutoff::Infinite)?,
                recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows, ks, mode, index.len()))
}

impl MetricReport {
    pub fn from_rows(
        rows: Vec<QueryRow>,
        ks: &[usize],
        mode: RecallMode,
        index_size: usize,
    ) -> Self {
        let mrr = canonical_mean(rows.iter().map(|r| r.reciprocal_rank));
        let recall = ks
            .iter()
            .enumerate()
            .map(|(i, &k)| RecallAtK {
                k,
                value: canonical_mean(rows.iter().map(|r| r.recall[i])),
            })
            .collect();
        Self {
            recall_mode: mode,
            query_count: rows.len(),
            index_size,
            mrr,
            recall,
            rows,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    /// Aggregates only (no per-query rows).
    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            mrr: self.mrr,
            recall: self.recall.clone(),
            query_count: self.query_count,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per query followed by a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "query_id".to_string(),
            "gt_scene".into(),
            "first_hit_rank".into(),
            "reciprocal_rank".into(),
        ];
        header.extend(self.recall.iter().map(|r| format!("recall@{}", r.k)));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.query_id.clone(),
                row.gt_scene.clone(),
                row.first_hit_rank
                    .map(|r| r.to_string())
                    .unwrap_or_default(),
                row.reciprocal_rank.to_string(),
            ];
            rec.extend(row.recall.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let mut mean = vec![
            "mean".to_string(),
            String::new(),
            String::new(),
            self.mrr.to_string(),
        ];
        mean.extend(self.recall.iter().map(|r| r.value.to_string()));
        w.write_record(&mean)?;
        let bytes = w
            .into_inner()
            .map_err(|e| io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(
            &dir.join(format!("{stem}.json")),
            self.to_json()?.as_bytes(),
        )?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mrr: f64,
    pub recall: Vec<RecallAtK>,
    pub query_count: usize,
}

impl MetricSummary {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Hit;
    use std::sync::Arc;

    fn ranked(scenes: &[&str]) -> RankedResult {
        RankedResult {
            hits: scenes
                .iter()
                .enumerate()
                .map(|(i, s)| Hit {
                    entry: i,
                    scene_id: Arc::from(*s),
                    view_id: None,
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(
            mrr(&ranked(&["A", "B", "C"]), "A", Cutoff::Infinite).unwrap(),
            1.0
        );
        assert_eq!(
            mrr(&ranked(&["B", "A", "A", "C"]), "A", Cutoff::Infinite).unwrap(),
            0.5
        );
        assert_eq!(
            mrr(&ranked(&["B", "C", "D"]), "A", Cutoff::At(2)).unwrap(),
            0.0
        );
        assert_eq!(
            mrr(&ranked(&["B", "C", "A"]), "A", Cutoff::At(2)).unwrap(),
            0.0
        );
        assert!(matches!(
            mrr(&ranked(&[]), "A", Cutoff::Infinite),
            Err(MetricsError::EmptyRanking)
        ));
    }

    #[test]
    fn recall_examples() {
        let r = ranked(&["A", "A", "A", "B", "C"]);
        assert_eq!(recall_at_k(&r, "A", 5, RecallMode::Fraction).unwrap(), 0.6);
        let r = ranked(&["B", "A", "C", "D", "E"]);
        assert_eq!(recall_at_k(&r, "A", 5, RecallMode::Hit).unwrap(), 1.0);
        assert!(matches!(
            recall_at_k(&r, "A", 0, RecallMode::Hit),
            Err(MetricsError::ZeroK)
        ));
    }

    #[test]
    fn scene_level_single_entry_recall() {
        // One vector per scene: the ground-truth scene can fill at most one slot.
        let r = ranked(&["B", "C", "A", "D", "E"]);
        assert_eq!(recall_at_k(&r, "A", 5, RecallMode::Fraction).unwrap(), 0.2);
        assert_eq!(recall_at_k(&r, "A", 5, RecallMode::Hit).unwrap(), 1.0);
    }

    #[test]
    fn csv_has_mean_row() {
        let rows = vec![
            QueryRow {
                query_id: "q1".into(),
                gt_scene: "A".into(),
                first_hit_rank: Some(1),
                reciprocal_rank: 1.0,
                recall: vec![1.0],
            },
            QueryRow {
                query_id: "q2".into(),
                gt_scene: "B".into(),
                first_hit_rank: Some(4),
                reciprocal_rank: 0.25,
                recall: vec![0.0],
            },
        ];
        let report = MetricReport::from_rows(rows, &[1], RecallMode::Hit, 10);
        assert_eq!(report.mrr, 0.625);
        let csv = report.to_csv().unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "query_id,gt_scene,first_hit_rank,reciprocal_rank,recall@1"
        );
        assert_eq!(lines[3], "mean,,,0.625,0.5");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scenes() -> impl Strategy<Value = Vec<String>> {
            prop::collection::vec(prop::sample::select(vec!["A", "B", "C", "D"]), 1..30)
                .prop_map(|v| v.into_iter().map(String::from).collect())
        }

        proptest! {
            #[test]
            fn recall_hit_monotone_in_k(s in scenes()) {
                let refs: Vec<&str> = s.iter().map(String::as_str).collect();
                let r = ranked(&refs);
                let mut prev = 0.0;
                for k in 1..=s.len() + 2 {
                    let v = recall_at_k(&r, "A", k, RecallMode::Hit).unwrap();
                    prop_assert!(v >= prev);
                    prev = v;
                }
            }

            #[test]
            fn mrr_cutoff_bounded_by_infinite(s in scenes(), k in 1usize..40) {
                let refs: Vec<&str> = s.iter().map(String::as_str).collect();
                let r = ranked(&refs);
                let at = mrr(&r, "A", Cutoff::At(k)).unwrap();
                let inf = mrr(&r, "A", Cutoff::Infinite).unwrap();
                prop_assert!(at <= inf);
                if first_hit_rank(&r, "A").is_some_and(|p| p <= k) {
                    prop_assert_eq!(at, inf);
                }
                if s.iter().any(|x| x == "A") {
                    prop_assert!(inf > 0.0);
                }
            }

            #[test]
            fn recall_modes_agree_at_one(s in scenes()) {
                let refs: Vec<&str> = s.iter().map(String::as_str).collect();
                let r = ranked(&refs);
                prop_assert_eq!(
                    recall_at_k(&r, "B", 1, RecallMode::Hit).unwrap(),
                    recall_at_k(&r, "B", 1, RecallMode::Fraction).unwrap()
                );
            }
        }
    }
}
