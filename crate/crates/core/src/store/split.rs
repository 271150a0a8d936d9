//! Per-scene partition of views into train / database / query roles.
//!
//! Each scene's views are shuffled once with a seed derived from the split
//! seed and the scene id. Roles are then carved out of that permutation in a
//! fixed layout, so the permutation never depends on `k_*`:
//!
//! ```text
//! unseen: [ query | train | db | unused ]
//! seen:   [ query | pool ............... ]   db = pool[..k_db], train = pool[..k_train]
//! ```
//!
//! Consequences: query views never change with `k_db` or `k_train`; database
//! sets for growing `k_db` are nested; in seen mode one of train/db is always
//! a prefix of the other.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Result, StoreError};
use crate::io::write_atomic;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Database views may have been used for training.
    Seen,
    /// Training, database and query views are mutually disjoint.
    Unseen,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Seen => "seen",
            SplitMode::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub k_train: usize,
    pub k_db: usize,
    pub k_query: usize,
    pub mode: SplitMode,
}

impl SplitParams {
    /// Views a scene needs for these parameters.
    pub fn required_views(&self) -> usize {
        match self.mode {
            SplitMode::Unseen => self.k_query + self.k_train + self.k_db,
            SplitMode::Seen => self.k_query + self.k_train.max(self.k_db),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSplit {
    pub scene_id: String,
    pub train_views: Vec<String>,
    pub db_views: Vec<String>,
    pub query_views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    pub k_train: usize,
    pub k_db: usize,
    pub k_query: usize,
    pub scenes: Vec<SceneSplit>,
}

/// Partitions every scene of `manifest` according to `params`.
pub fn make_split(manifest: &DatasetManifest, params: SplitParams, seed: u64) -> Result<SplitSpec> {
    if params.k_db == 0 {
        return Err(StoreError::InvalidParameter(
            "k_db must be at least 1".into(),
        ));
    }
    if params.k_query == 0 {
        return Err(StoreError::InvalidParameter(
            "k_query must be at least 1".into(),
        ));
    }
    let required = params.required_views();
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for scene in &manifest.scenes {
        if scene.views.len() < required {
            return Err(StoreError::InsufficientViews {
                scene_id: scene.scene_id.clone(),
                available: scene.views.len(),
                required,
            });
        }
        let mut perm: Vec<&str> = scene.views.iter().map(|v| v.view_id.as_str()).collect();
        let mut rng = seed::rng(seed::derive(seed, &format!("split/{}", scene.scene_id)));
        perm.shuffle(&mut rng);

        let take =
            |r: std::ops::Range<usize>| perm[r].iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let kq = params.k_query;
        let (train_views, db_views) = match params.mode {
            SplitMode::Unseen => (
                take(kq..kq + params.k_train),
                take(kq + params.k_train..kq + params.k_train + params.k_db),
            ),
            SplitMode::Seen => (take(kq..kq + params.k_train), take(kq..kq + params.k_db)),
        };
        scenes.push(SceneSplit {
            scene_id: scene.scene_id.clone(),
            train_views,
            db_views,
            query_views: take(0..kq),
        });
    }
    let spec = SplitSpec {
        mode: params.mode,
        seed,
        k_train: params.k_train,
        k_db: params.k_db,
        k_query: params.k_query,
        scenes,
    };
    debug_assert!(spec.validate().is_ok());
    Ok(spec)
}

impl SplitSpec {
    pub fn params(&self) -> SplitParams {
        SplitParams {
            k_train: self.k_train,
            k_db: self.k_db,
            k_query: self.k_query,
            mode: self.mode,
        }
    }

    pub fn scene(&self, scene_id: &str) -> Option<&SceneSplit> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Checks list sizes and the disjointness contract of the split mode.
    pub fn validate(&self) -> Result<()> {
        for s in &self.scenes {
            let sizes = [
                ("train", s.train_views.len(), self.k_train),
                ("db", s.db_views.len(), self.k_db),
                ("query", s.query_views.len(), self.k_query),
            ];
            for (role, got, want) in sizes {
                if got != want {
                    return Err(StoreError::InvalidSplit(format!(
                        "scene {} has {got} {role} views, expected {want}",
                        s.scene_id
                    )));
                }
            }
            let train: HashSet<&String> = s.train_views.iter().collect();
            let db: HashSet<&String> = s.db_views.iter().collect();
            let query: HashSet<&String> = s.query_views.iter().collect();
            if train.len() != s.train_views.len()
                || db.len() != s.db_views.len()
                || query.len() != s.query_views.len()
            {
                return Err(StoreError::InvalidSplit(format!(
                    "scene {} repeats a view within a role",
                    s.scene_id
                )));
            }
            let overlap =
                |a: &HashSet<&String>, b: &HashSet<&String>| a.intersection(b).next().is_some();
            if overlap(&query, &db) || overlap(&query, &train) {
                return Err(StoreError::InvalidSplit(format!(
                    "scene {} has query views shared with train or db",
                    s.scene_id
                )));
            }
            if self.mode == SplitMode::Unseen && overlap(&train, &db) {
                return Err(StoreError::InvalidSplit(format!(
                    "scene {} shares views between train and db in unseen mode",
                    s.scene_id
                )));
            }
        }
        Ok(())
    }

    /// Checks that every referenced view exists in `manifest`.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        let known: HashSet<(&str, &str)> = manifest.records().map(|(_, s, v)| (s, v)).collect();
        for s in &self.scenes {
            for v in s
                .train_views
                .iter()
                .chain(&s.db_views)
                .chain(&s.query_views)
            {
                if !known.contains(&(s.scene_id.as_str(), v.as_str())) {
                    return Err(StoreError::UnknownRecord {
                        scene_id: s.scene_id.clone(),
                        view_id: v.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `(scene_id, view_id)` pairs of the database role.
    pub fn db_keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.scenes.iter().flat_map(|s| {
            s.db_views
                .iter()
                .map(move |v| (s.scene_id.as_str(), v.as_str()))
        })
    }

    pub fn query_keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.scenes.iter().flat_map(|s| {
            s.query_views
                .iter()
                .map(move |v| (s.scene_id.as_str(), v.as_str()))
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| StoreError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        write_atomic(path, &json).map_err(|e| StoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
        let spec: SplitSpec = serde_json::from_slice(&bytes).map_err(|e| StoreError::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{SceneEntry, ViewEntry};

    fn manifest(scenes: usize, views: usize) -> DatasetManifest {
        DatasetManifest {
            dim: 1,
            dtype: "f32le".into(),
            record_count: scenes * views,
            scenes: (0..scenes)
                .map(|s| SceneEntry {
                    scene_id: format!("s{s}"),
                    views: (0..views)
                        .map(|v| ViewEntry {
                            view_id: format!("v{v}"),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn params(k_train: usize, k_db: usize, k_query: usize, mode: SplitMode) -> SplitParams {
        SplitParams {
            k_train,
            k_db,
            k_query,
            mode,
        }
    }

    #[test]
    fn seen_mode_allows_train_inside_db() {
        let spec = make_split(&manifest(5, 21), params(10, 20, 1, SplitMode::Seen), 3).unwrap();
        spec.validate().unwrap();
        for s in &spec.scenes {
            assert!(s.train_views.iter().all(|v| s.db_views.contains(v)));
            assert!(!s.db_views.contains(&s.query_views[0]));
        }
    }

    #[test]
    fn unseen_mode_needs_31_views() {
        let err =
            make_split(&manifest(5, 21), params(10, 20, 1, SplitMode::Unseen), 3).unwrap_err();
        assert!(matches!(
            err,
            StoreError::InsufficientViews {
                available: 21,
                required: 31,
                ..
            }
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let m = manifest(8, 12);
        let p = params(3, 4, 1, SplitMode::Unseen);
        assert_eq!(
            make_split(&m, p, 42).unwrap(),
            make_split(&m, p, 42).unwrap()
        );
        assert_ne!(
            make_split(&m, p, 42).unwrap(),
            make_split(&m, p, 43).unwrap()
        );
    }

    #[test]
    fn db_sets_are_nested_across_k_db() {
        let m = manifest(6, 20);
        for mode in [SplitMode::Seen, SplitMode::Unseen] {
            let small = make_split(&m, params(4, 2, 1, mode), 9).unwrap();
            let large = make_split(&m, params(4, 8, 1, mode), 9).unwrap();
            for (a, b) in small.scenes.iter().zip(&large.scenes) {
                assert_eq!(a.db_views[..], b.db_views[..2]);
                assert_eq!(a.query_views, b.query_views);
                assert_eq!(a.train_views, b.train_views);
            }
        }
    }

    #[test]
    fn zero_k_db_rejected() {
        assert!(make_split(&manifest(2, 4), params(0, 0, 1, SplitMode::Seen), 0).is_err());
    }

    #[test]
    fn validate_catches_unseen_overlap() {
        let mut spec = make_split(&manifest(2, 10), params(2, 2, 1, SplitMode::Unseen), 0).unwrap();
        spec.scenes[0].db_views[0] = spec.scenes[0].train_views[0].clone();
        assert!(matches!(spec.validate(), Err(StoreError::InvalidSplit(_))));
        spec.mode = SplitMode::Seen;
        spec.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = make_split(&manifest(3, 6), params(2, 2, 1, SplitMode::Unseen), 5).unwrap();
        let path = dir.path().join("split.json");
        spec.save(&path).unwrap();
        assert_eq!(SplitSpec::load(&path).unwrap(), spec);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unseen_roles_pairwise_disjoint(
                views in 3usize..30, kt in 0usize..8, kdb in 1usize..8, kq in 1usize..3, seed in any::<u64>()
            ) {
                let p = params(kt, kdb, kq, SplitMode::Unseen);
                prop_assume!(p.required_views() <= views);
                let spec = make_split(&manifest(3, views), p, seed).unwrap();
                for s in &spec.scenes {
                    let all: HashSet<_> = s.train_views.iter().chain(&s.db_views).chain(&s.query_views).collect();
                    prop_assert_eq!(all.len(), kt + kdb + kq);
                }
            }
        }
    }
}
