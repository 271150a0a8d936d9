//! Synthetic scene/view embeddings.
//!
//! Each scene gets a unit-norm centroid supported on the first
//! `dim - nuisance_dims` coordinates (the scene subspace). A view is the
//! centroid plus `sigma` times Gaussian noise confined to the last
//! `nuisance_dims` coordinates, renormalised. The noise has per-coordinate
//! standard deviation `1/sqrt(dim - nuisance_dims)`, the same scale as a
//! centroid coordinate, so `sigma` reads as a noise-to-signal ratio per
//! coordinate.
//!
//! Cosine retrieval on raw views degrades as `sigma` grows, while any map that
//! discards the nuisance subspace recovers the centroid exactly.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, Result, StoreError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub dim: usize,
    pub sigma: f64,
    pub nuisance_dims: usize,
    pub seed: u64,
}

pub fn scene_id(i: usize) -> String {
    format!("scene-{i:04}")
}

pub fn view_id(j: usize) -> String {
    format!("view-{j:03}")
}

pub fn synth_generate(p: &SynthParams) -> Result<Vec<EmbeddingRecord>> {
    if p.n_scenes == 0 || p.views_per_scene == 0 {
        return Err(StoreError::InvalidParameter(
            "n_scenes and views_per_scene must be positive".into(),
        ));
    }
    if p.nuisance_dims >= p.dim {
        return Err(StoreError::InvalidParameter(format!(
            "nuisance_dims ({}) must be smaller than dim ({}) to leave a scene subspace",
            p.nuisance_dims, p.dim
        )));
    }
    if !(p.sigma.is_finite() && p.sigma >= 0.0) {
        return Err(StoreError::InvalidParameter(format!(
            "sigma must be finite and non-negative, got {}",
            p.sigma
        )));
    }
    let scene_dims = p.dim - p.nuisance_dims;
    let noise_scale = p.sigma / (scene_dims as f64).sqrt();
    let mut rng = seed::rng(p.seed);

    let mut out = Vec::with_capacity(p.n_scenes * p.views_per_scene);
    let mut centroid = vec![0.0f64; p.dim];
    let mut view = vec![0.0f64; p.dim];
    for i in 0..p.n_scenes {
        // Resample the (measure-zero) all-zero draw.
        loop {
            for c in centroid[..scene_dims].iter_mut() {
                *c = StandardNormal.sample(&mut rng);
            }
            let norm = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                centroid.iter_mut().for_each(|c| *c /= norm);
                break;
            }
        }
        for j in 0..p.views_per_scene {
            view.copy_from_slice(&centroid);
            for c in view[scene_dims..].iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *c = noise_scale * z;
            }
            let norm = view.iter().map(|x| x * x).sum::<f64>().sqrt();
            let vector = view.iter().map(|x| (x / norm) as f32).collect();
            out.push(EmbeddingRecord::new(scene_id(i), view_id(j), vector));
        }
    }
    Ok(out)
}
