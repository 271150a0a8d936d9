//! Canonical embedding store.
//!
//! A dataset is a directory holding two files:
//!
//! - `manifest.json`: `{"dim", "dtype": "f32le", "record_count", "scenes": [{"scene_id", "views": [{"view_id"}]}]}`.
//!   The record index of a view is its position in depth-first manifest order.
//! - `embeddings.bin`: `record_count × dim` little-endian `f32`, row-major, no
//!   header and no padding.
//!
//! Vectors are stored exactly as produced by the upstream encoder (no
//! normalisation). A [`Dataset`] can be opened eagerly (whole matrix in memory)
//! or streamed, in which case rows are read from disk on demand.

mod split;
mod synth;

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32s_to_le_bytes, le_bytes_to_f32s, write_atomic};

pub use split::{make_split, SceneSplit, SplitMode, SplitParams, SplitSpec};
pub use synth::{synth_generate, SynthParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dataset has no records")]
    Empty,
    #[error("dimension mismatch for {scene_id}/{view_id}: expected {expected}, got {actual}")]
    DimensionMismatch {
        scene_id: String,
        view_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate record key {scene_id}/{view_id}")]
    DuplicateKey { scene_id: String, view_id: String },
    #[error("non-finite value in {scene_id}/{view_id} at component {component}")]
    NonFinite {
        scene_id: String,
        view_id: String,
        component: usize,
    },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("size mismatch: manifest implies {expected} bytes but {path} has {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("record index {index} out of range ({len} records)")]
    OutOfRange { index: usize, len: usize },
    #[error("unknown record {scene_id}/{view_id}")]
    UnknownRecord { scene_id: String, view_id: String },
    #[error("scene {scene_id} has {available} views, needs {required}")]
    InsufficientViews {
        scene_id: String,
        available: usize,
        required: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// One view's embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub scene_id: String,
    pub view_id: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(scene_id: impl Into<String>, view_id: impl Into<String>, vector: Vec<f32>) -> Self {
        Self {
            scene_id: scene_id.into(),
            view_id: view_id.into(),
            vector,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub view_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub dtype: String,
    pub record_count: usize,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    /// Iterates `(record_index, scene_id, view_id)` in manifest order.
    pub fn records(&self) -> impl Iterator<Item = (usize, &str, &str)> + '_ {
        self.scenes
            .iter()
            .flat_map(|s| {
                s.views
                    .iter()
                    .map(move |v| (s.scene_id.as_str(), v.view_id.as_str()))
            })
            .enumerate()
            .map(|(i, (s, v))| (i, s, v))
    }

    pub fn bin_size(&self) -> u64 {
        self.record_count as u64 * self.dim as u64 * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(StoreError::InvalidManifest("dim must be positive".into()));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(StoreError::InvalidManifest(format!(
                "unsupported dtype {:?}, expected {DTYPE_F32LE:?}",
                self.dtype
            )));
        }
        let total: usize = self.scenes.iter().map(|s| s.views.len()).sum();
        if total != self.record_count {
            return Err(StoreError::InvalidManifest(format!(
                "record_count {} but scenes list {} views",
                self.record_count, total
            )));
        }
        let mut seen_scenes = HashMap::new();
        for scene in &self.scenes {
            if seen_scenes.insert(scene.scene_id.as_str(), ()).is_some() {
                return Err(StoreError::InvalidManifest(format!(
                    "scene {} listed twice",
                    scene.scene_id
                )));
            }
            let mut seen_views = HashMap::new();
            for v in &scene.views {
                if seen_views.insert(v.view_id.as_str(), ()).is_some() {
                    return Err(StoreError::DuplicateKey {
                        scene_id: scene.scene_id.clone(),
                        view_id: v.view_id.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Builds the manifest for `records`, grouping views by scene in order of
    /// first appearance. Returns the manifest and the permutation of `records`
    /// that realises manifest order.
    fn from_records(records: &[EmbeddingRecord]) -> Result<(Self, Vec<usize>)> {
        let first = records.first().ok_or(StoreError::Empty)?;
        let dim = first.vector.len();
        if dim == 0 {
            return Err(StoreError::DimensionMismatch {
                scene_id: first.scene_id.clone(),
                view_id: first.view_id.clone(),
                expected: 1,
                actual: 0,
            });
        }
        let mut scene_pos: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut keys: HashMap<(&str, &str), ()> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    scene_id: r.scene_id.clone(),
                    view_id: r.view_id.clone(),
                    expected: dim,
                    actual: r.vector.len(),
                });
            }
            if let Some(c) = r.vector.iter().position(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite {
                    scene_id: r.scene_id.clone(),
                    view_id: r.view_id.clone(),
                    component: c,
                });
            }
            if keys.insert((&r.scene_id, &r.view_id), ()).is_some() {
                return Err(StoreError::DuplicateKey {
                    scene_id: r.scene_id.clone(),
                    view_id: r.view_id.clone(),
                });
            }
            let g = *scene_pos.entry(&r.scene_id).or_insert_with(|| {
                groups.push((&r.scene_id, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        let order: Vec<usize> = groups
            .iter()
            .flat_map(|(_, ix)| ix.iter().copied())
            .collect();
        let scenes = groups
            .iter()
            .map(|(scene_id, ix)| SceneEntry {
                scene_id: scene_id.to_string(),
                views: ix
                    .iter()
                    .map(|&i| ViewEntry {
                        view_id: records[i].view_id.clone(),
                    })
                    .collect(),
            })
            .collect();
        Ok((
            DatasetManifest {
                dim,
                dtype: DTYPE_F32LE.to_string(),
                record_count: records.len(),
                scenes,
            },
            order,
        ))
    }
}

/// Writes `records` as a dataset directory and returns the manifest that was
/// written. Records of the same scene are grouped in order of first appearance.
pub fn write_dataset(
    records: &[EmbeddingRecord],
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let (manifest, order) = DatasetManifest::from_records(records)?;
    let mut flat = Vec::with_capacity(manifest.record_count * manifest.dim);
    for i in order {
        flat.extend_from_slice(&records[i].vector);
    }
    write_raw(dir, &manifest, &flat)?;
    Ok(manifest)
}

fn write_raw(dir: &Path, manifest: &DatasetManifest, flat: &[f32]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let bin_path = dir.join(EMBEDDINGS_FILE);
    write_atomic(&bin_path, &f32s_to_le_bytes(flat)).map_err(|e| StoreError::io(&bin_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| StoreError::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    write_atomic(&manifest_path, &json).map_err(|e| StoreError::io(&manifest_path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Json { path, source: e })?;
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    /// Load the whole matrix into memory.
    Eager,
    /// Read rows from disk on demand.
    Streamed,
}

#[derive(Debug)]
enum Storage {
    Memory(Vec<f32>),
    File { path: PathBuf, file: File },
}

#[derive(Debug)]
struct SceneSpan {
    start: usize,
    views: HashMap<String, usize>,
}

/// An opened, validated dataset. Immutable; safe to share between threads.
#[derive(Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    keys: Vec<(usize, usize)>,
    scenes: HashMap<String, SceneSpan>,
    storage: Storage,
}

/// Read size when scanning a streamed dataset.
const SCAN_CHUNK_BYTES: usize = 1 << 20;

impl Dataset {
    /// Opens a dataset directory. Both access modes run a full validation pass
    /// (size consistency and a non-finite scan); the streamed pass reads the
    /// file in bounded chunks.
    pub fn open(dir: impl AsRef<Path>, access: AccessMode) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let bin_path = dir.join(EMBEDDINGS_FILE);
        let file = File::open(&bin_path).map_err(|e| StoreError::io(&bin_path, e))?;
        let actual = file
            .metadata()
            .map_err(|e| StoreError::io(&bin_path, e))?
            .len();
        if actual != manifest.bin_size() {
            return Err(StoreError::SizeMismatch {
                path: bin_path,
                expected: manifest.bin_size(),
                actual,
            });
        }
        let storage = match access {
            AccessMode::Eager => {
                let mut bytes = Vec::with_capacity(actual as usize);
                (&file)
                    .read_to_end(&mut bytes)
                    .map_err(|e| StoreError::io(&bin_path, e))?;
                let mut data = Vec::with_capacity(bytes.len() / 4);
                le_bytes_to_f32s(&bytes, &mut data);
                Storage::Memory(data)
            }
            AccessMode::Streamed => Storage::File {
                path: bin_path,
                file,
            },
        };
        let ds = Self::assemble(manifest, storage);
        ds.validate_values()?;
        Ok(ds)
    }

    /// Builds an in-memory dataset with the same validation as [`write_dataset`].
    pub fn from_records(records: &[EmbeddingRecord]) -> Result<Self> {
        let (manifest, order) = DatasetManifest::from_records(records)?;
        let mut flat = Vec::with_capacity(manifest.record_count * manifest.dim);
        for i in order {
            flat.extend_from_slice(&records[i].vector);
        }
        Ok(Self::assemble(manifest, Storage::Memory(flat)))
    }

    fn assemble(manifest: DatasetManifest, storage: Storage) -> Self {
        let mut keys = Vec::with_capacity(manifest.record_count);
        let mut scenes = HashMap::with_capacity(manifest.scenes.len());
        let mut start = 0;
        for (si, scene) in manifest.scenes.iter().enumerate() {
            let views = scene
                .views
                .iter()
                .enumerate()
                .map(|(vi, v)| (v.view_id.clone(), vi))
                .collect();
            for vi in 0..scene.views.len() {
                keys.push((si, vi));
            }
            scenes.insert(scene.scene_id.clone(), SceneSpan { start, views });
            start += scene.views.len();
        }
        Self {
            manifest,
            keys,
            scenes,
            storage,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.record_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn access_mode(&self) -> AccessMode {
        match self.storage {
            Storage::Memory(_) => AccessMode::Eager,
            Storage::File { .. } => AccessMode::Streamed,
        }
    }

    /// `(scene_id, view_id)` of record `index`.
    pub fn key(&self, index: usize) -> Result<(&str, &str)> {
        let &(si, vi) = self.keys.get(index).ok_or(StoreError::OutOfRange {
            index,
            len: self.len(),
        })?;
        let scene = &self.manifest.scenes[si];
        Ok((&scene.scene_id, &scene.views[vi].view_id))
    }

    pub fn index_of(&self, scene_id: &str, view_id: &str) -> Option<usize> {
        let span = self.scenes.get(scene_id)?;
        span.views.get(view_id).map(|vi| span.start + vi)
    }

    /// Vector of record `index`. Borrowed for eager datasets, read from disk
    /// for streamed ones.
    pub fn vector(&self, index: usize) -> Result<Cow<'_, [f32]>> {
        if index >= self.len() {
            return Err(StoreError::OutOfRange {
                index,
                len: self.len(),
            });
        }
        let dim = self.dim();
        match &self.storage {
            Storage::Memory(data) => Ok(Cow::Borrowed(&data[index * dim..(index + 1) * dim])),
            Storage::File { path, file } => {
                let mut bytes = vec![0u8; dim * 4];
                read_at(file, &mut bytes, (index * dim * 4) as u64)
                    .map_err(|e| StoreError::io(path, e))?;
                let mut out = Vec::with_capacity(dim);
                le_bytes_to_f32s(&bytes, &mut out);
                Ok(Cow::Owned(out))
            }
        }
    }

    pub fn vector_by_key(&self, scene_id: &str, view_id: &str) -> Result<Cow<'_, [f32]>> {
        let i = self
            .index_of(scene_id, view_id)
            .ok_or_else(|| StoreError::UnknownRecord {
                scene_id: scene_id.to_string(),
                view_id: view_id.to_string(),
            })?;
        self.vector(i)
    }

    /// Visits every record in manifest order. Streamed datasets are read in
    /// bounded chunks, never as a whole.
    pub fn for_each_record<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &str, &str, &[f32]) -> Result<()>,
    {
        let dim = self.dim();
        match &self.storage {
            Storage::Memory(data) => {
                for (i, row) in data.chunks_exact(dim).enumerate() {
                    let (s, v) = self.key(i)?;
                    f(i, s, v, row)?;
                }
            }
            Storage::File { path, file } => {
                let rows_per_chunk = (SCAN_CHUNK_BYTES / (dim * 4)).max(1);
                let mut bytes = Vec::new();
                let mut rows = Vec::new();
                let mut start = 0;
                while start < self.len() {
                    let n = rows_per_chunk.min(self.len() - start);
                    bytes.resize(n * dim * 4, 0);
                    read_at(file, &mut bytes, (start * dim * 4) as u64)
                        .map_err(|e| StoreError::io(path, e))?;
                    rows.clear();
                    le_bytes_to_f32s(&bytes, &mut rows);
                    for (j, row) in rows.chunks_exact(dim).enumerate() {
                        let (s, v) = self.key(start + j)?;
                        f(start + j, s, v, row)?;
                    }
                    start += n;
                }
            }
        }
        Ok(())
    }

    fn validate_values(&self) -> Result<()> {
        self.for_each_record(
            |_, s, v, row| match row.iter().position(|x| !x.is_finite()) {
                Some(c) => Err(StoreError::NonFinite {
                    scene_id: s.to_string(),
                    view_id: v.to_string(),
                    component: c,
                }),
                None => Ok(()),
            },
        )
    }

    /// Copies all records out (loads the whole dataset).
    pub fn to_records(&self) -> Result<Vec<EmbeddingRecord>> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_record(|_, s, v, row| {
            out.push(EmbeddingRecord::new(s, v, row.to_vec()));
            Ok(())
        })?;
        Ok(out)
    }

    /// Writes this dataset in canonical form to `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let records = self.to_records()?;
        write_dataset(&records, dir)
    }
}

/// Convenience wrapper around [`Dataset::open`].
pub fn read_dataset(dir: impl AsRef<Path>, access: AccessMode) -> Result<Dataset> {
    Dataset::open(dir, access)
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}
