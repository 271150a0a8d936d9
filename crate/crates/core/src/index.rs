//! Exact cosine-similarity index.
//!
//! Vectors are unit-normalised once at build time so that a query reduces to
//! a full inner-product scan. Results are ordered by descending score with
//! ties broken by ascending entry index.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32s_to_le_bytes, le_bytes_to_f32s, write_atomic};
use crate::store::{Dataset, SplitSpec, StoreError};

pub const INDEX_META_FILE: &str = "index.json";
pub const INDEX_MATRIX_FILE: &str = "index.bin";

/// Allowed deviation of a stored row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Scans at least this many floats before splitting work across threads.
const PARALLEL_SCAN_FLOATS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm vector: {0}")]
    ZeroVector(String),
    #[error("selector matched no records")]
    EmptySelection,
    #[error("selected record {scene_id}/{view_id} not in dataset")]
    MissingRecord { scene_id: String, view_id: String },
    #[error("scene {0} aggregates to the zero vector")]
    ZeroAggregate(String),
    #[error("aggregation needs a view-level index")]
    NotViewLevel,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("corrupt index cache: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, IndexError>;

/// `u·v / (|u| |v|)`, accumulated in `f64`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(IndexError::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(IndexError::ZeroVector("cosine_similarity input".into()));
    }
    // sqrt(nu * nv) rather than sqrt(nu) * sqrt(nv): identical inputs give exactly 1.
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

fn normalize_into(v: &[f32], out: &mut Vec<f32>) -> bool {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    out.extend(v.iter().map(|&x| (f64::from(x) / norm) as f32));
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    View,
    Scene,
}

/// One row of the index. `view_id` is `None` for scene-level (aggregated) rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub scene_id: Arc<str>,
    pub view_id: Option<Arc<str>>,
}

/// Which dataset records go into an index.
#[derive(Debug, Clone)]
pub enum Selector<'a> {
    All,
    Keys(HashSet<(&'a str, &'a str)>),
}

impl<'a> Selector<'a> {
    pub fn db_views(split: &'a SplitSpec) -> Self {
        Selector::Keys(split.db_keys().collect())
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        if let Selector::Keys(keys) = self {
            if keys.is_empty() {
                return Err(IndexError::EmptySelection);
            }
            // Report the first missing key in a stable order.
            let mut missing: Vec<_> = keys
                .iter()
                .filter(|(s, v)| dataset.index_of(s, v).is_none())
                .collect();
            missing.sort();
            if let Some((s, v)) = missing.first() {
                return Err(IndexError::MissingRecord {
                    scene_id: s.to_string(),
                    view_id: v.to_string(),
                });
            }
        }
        Ok(())
    }

    fn contains(&self, scene_id: &str, view_id: &str) -> bool {
        match self {
            Selector::All => true,
            Selector::Keys(keys) => keys.contains(&(scene_id, view_id)),
        }
    }
}

/// How scene vectors are formed from view vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanOrder {
    /// Mean of unit-normalised views (spherical centroid).
    NormalizeThenMean,
    /// Mean of raw views.
    MeanThenNormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entry: usize,
    pub scene_id: Arc<str>,
    pub view_id: Option<Arc<str>>,
    pub score: f64,
}

/// Hits in descending score order; ties in ascending entry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub hits: Vec<Hit>,
}

impl RankedResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn scenes(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| &*h.scene_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    level: Level,
    entries: Vec<IndexEntry>,
    matrix: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    dim: usize,
    level: Level,
    dtype: String,
    entries: Vec<IndexEntry>,
}

impl Index {
    /// Builds a view-level index over the selected records, in manifest order.
    pub fn build(dataset: &Dataset, selector: &Selector<'_>) -> Result<Self> {
        selector.check(dataset)?;
        let dim = dataset.dim();
        let mut entries = Vec::new();
        let mut matrix = Vec::new();
        dataset
            .for_each_record(|_, s, v, row| {
                if selector.contains(s, v) {
                    entries.push(IndexEntry {
                        scene_id: s.into(),
                        view_id: Some(v.into()),
                    });
                    if !normalize_into(row, &mut matrix) {
                        return Err(StoreError::InvalidParameter(format!("zero vector {s}/{v}")));
                    }
                }
                Ok(())
            })
            .map_err(|e| match e {
                StoreError::InvalidParameter(msg) => IndexError::ZeroVector(msg),
                other => IndexError::Store(other),
            })?;
        if entries.is_empty() {
            return Err(IndexError::EmptySelection);
        }
        Ok(Self {
            dim,
            level: Level::View,
            entries,
            matrix,
        })
    }

    /// Builds a scene-level index directly from raw dataset vectors.
    pub fn build_scene_level(
        dataset: &Dataset,
        selector: &Selector<'_>,
        order: MeanOrder,
    ) -> Result<Self> {
        match order {
            MeanOrder::NormalizeThenMean => Self::build(dataset, selector)?.aggregate_scenes(),
            MeanOrder::MeanThenNormalize => {
                selector.check(dataset)?;
                let dim = dataset.dim();
                let mut sums: Vec<(Arc<str>, Vec<f64>, usize)> = Vec::new();
                let mut pos: HashMap<String, usize> = HashMap::new();
                dataset.for_each_record(|_, s, v, row| {
                    if selector.contains(s, v) {
                        let i = *pos.entry(s.to_string()).or_insert_with(|| {
                            sums.push((s.into(), vec![0.0; dim], 0));
                            sums.len() - 1
                        });
                        let acc = &mut sums[i];
                        acc.1
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &x)| *a += f64::from(x));
                        acc.2 += 1;
                    }
                    Ok(())
                })?;
                Self::from_scene_sums(dim, sums)
            }
        }
    }

    fn from_scene_sums(dim: usize, sums: Vec<(Arc<str>, Vec<f64>, usize)>) -> Result<Self> {
        if sums.is_empty() {
            return Err(IndexError::EmptySelection);
        }
        let mut entries = Vec::with_capacity(sums.len());
        let mut matrix = Vec::with_capacity(sums.len() * dim);
        for (scene, sum, count) in sums {
            let mean: Vec<f64> = sum.iter().map(|x| x / count as f64).collect();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= NORM_TOLERANCE {
                return Err(IndexError::ZeroAggregate(scene.to_string()));
            }
            matrix.extend(mean.iter().map(|x| (x / norm) as f32));
            entries.push(IndexEntry {
                scene_id: scene,
                view_id: None,
            });
        }
        Ok(Self {
            dim,
            level: Level::Scene,
            entries,
            matrix,
        })
    }

    /// Replaces each scene's views by the renormalised mean of its (already
    /// normalised) view vectors. Scene order follows first appearance.
    pub fn aggregate_scenes(&self) -> Result<Self> {
        if self.level != Level::View {
            return Err(IndexError::NotViewLevel);
        }
        let mut sums: Vec<(Arc<str>, Vec<f64>, usize)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (e, row) in self.entries.iter().zip(self.matrix.chunks_exact(self.dim)) {
            let i = *pos.entry(&e.scene_id).or_insert_with(|| {
                sums.push((e.scene_id.clone(), vec![0.0; self.dim], 0));
                sums.len() - 1
            });
            let acc = &mut sums[i];
            acc.1
                .iter_mut()
                .zip(row)
                .for_each(|(a, &x)| *a += f64::from(x));
            acc.2 += 1;
        }
        Self::from_scene_sums(self.dim, sums)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Normalised row `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    fn normalized_query(&self, q: &[f32]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let norm = l2_norm(q);
        if norm == 0.0 || !norm.is_finite() {
            return Err(IndexError::ZeroVector("query".into()));
        }
        Ok(q.iter().map(|&x| f64::from(x) / norm).collect())
    }

    /// Cosine score of `q` against every entry. Each score is an independent
    /// sequential dot product, so threading does not change any bit.
    pub fn scores(&self, q: &[f32]) -> Result<Vec<f64>> {
        let qn = self.normalized_query(q)?;
        let dot =
            |row: &[f32]| -> f64 { row.iter().zip(&qn).map(|(&a, &b)| f64::from(a) * b).sum() };
        Ok(if self.matrix.len() >= PARALLEL_SCAN_FLOATS {
            self.matrix.par_chunks_exact(self.dim).map(dot).collect()
        } else {
            self.matrix.chunks_exact(self.dim).map(dot).collect()
        })
    }

    /// The `k` best entries for `q`. `k` larger than the index returns every entry.
    pub fn query_top_k(&self, q: &[f32], k: usize) -> Result<RankedResult> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let scores = self.scores(q)?;
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RankedResult {
            hits: order
                .into_iter()
                .map(|i| Hit {
                    entry: i,
                    scene_id: self.entries[i].scene_id.clone(),
                    view_id: self.entries[i].view_id.clone(),
                    score: scores[i],
                })
                .collect(),
        })
    }

    pub fn full_ranking(&self, q: &[f32]) -> Result<RankedResult> {
        self.query_top_k(q, self.len())
    }

    /// Writes `index.json` + `index.bin` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io_err = |p: PathBuf| move |e| IndexError::Store(StoreError::io(p, e));
        let bin = dir.join(INDEX_MATRIX_FILE);
        write_atomic(&bin, &f32s_to_le_bytes(&self.matrix)).map_err(io_err(bin.clone()))?;
        let meta = IndexMeta {
            dim: self.dim,
            level: self.level,
            dtype: crate::store::DTYPE_F32LE.into(),
            entries: self.entries.clone(),
        };
        let json =
            serde_json::to_vec_pretty(&meta).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        let meta_path = dir.join(INDEX_META_FILE);
        write_atomic(&meta_path, &json).map_err(io_err(meta_path.clone()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |p: PathBuf| fs::read(&p).map_err(|e| IndexError::Store(StoreError::io(p, e)));
        let meta: IndexMeta = serde_json::from_slice(&read(dir.join(INDEX_META_FILE))?)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if meta.dtype != crate::store::DTYPE_F32LE || meta.dim == 0 {
            return Err(IndexError::Corrupt(format!(
                "dtype {} dim {}",
                meta.dtype, meta.dim
            )));
        }
        let bytes = read(dir.join(INDEX_MATRIX_FILE))?;
        if bytes.len() != meta.entries.len() * meta.dim * 4 {
            return Err(IndexError::Corrupt(format!(
                "matrix has {} bytes, expected {}",
                bytes.len(),
                meta.entries.len() * meta.dim * 4
            )));
        }
        let mut matrix = Vec::with_capacity(bytes.len() / 4);
        le_bytes_to_f32s(&bytes, &mut matrix);
        for (i, row) in matrix.chunks_exact(meta.dim).enumerate() {
            let n = l2_norm(row);
            if n.is_nan() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(IndexError::Corrupt(format!("row {i} has norm {n}")));
            }
        }
        Ok(Self {
            dim: meta.dim,
            level: meta.level,
            entries: meta.entries,
            matrix,
        })
    }
}
