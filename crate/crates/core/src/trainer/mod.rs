//! Contrastive training of an MLP head over frozen embeddings.
//!
//! Positive pairs are two distinct training views of the same scene; every
//! other item in the batch is a negative. Parameters are updated with plain
//! gradient descent.

mod checkpoint;
mod head;
mod loss;

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::store::{Dataset, SplitSpec, StoreError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use head::{init_head, Activation, Dense, HeadGradients, HeadParams, LayerGradients};
pub use loss::{nt_xent_loss, nt_xent_with_grad};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid head shape: {0}")]
    InvalidShape(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("input has dimension {actual}, head expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("projection {0} has zero norm")]
    ZeroProjection(usize),
    #[error("scene {scene_id} has {available} training views; a positive pair needs 2")]
    TooFewTrainViews { scene_id: String, available: usize },
    #[error("batch_scenes {batch_scenes} exceeds the {scenes} scenes in the split")]
    BatchTooLarge { batch_scenes: usize, scenes: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite {what}")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: &'static str,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Scenes per batch; a batch holds two views of each.
    pub batch_scenes: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Number of affine layers in the trunk.
    pub trunk_depth: usize,
    /// Width of the hidden trunk layers.
    pub hidden_width: usize,
    pub representation_dim: usize,
    pub projection_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            batch_scenes: 32,
            lr: 0.05,
            epochs: 100,
            seed: 0,
            trunk_depth: 2,
            hidden_width: 256,
            representation_dim: 128,
            projection_dim: 64,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_scenes < 2 {
            return bad(format!(
                "batch_scenes must be at least 2, got {}",
                self.batch_scenes
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        Ok(())
    }

    /// Widths `[input, hidden…, representation]` of the trunk.
    pub fn layer_dims(&self, input_dim: usize) -> Result<Vec<usize>> {
        if self.trunk_depth == 0 {
            return Err(TrainError::InvalidShape(
                "trunk_depth must be at least 1".into(),
            ));
        }
        if input_dim == 0
            || self.hidden_width == 0
            || self.representation_dim == 0
            || self.projection_dim == 0
        {
            return Err(TrainError::InvalidShape(
                "layer widths must be positive".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.trunk_depth - 1));
        dims.push(self.representation_dim);
        Ok(dims)
    }
}

/// Batch loss and full parameter gradient for `inputs`, laid out as pairs
/// `(2t, 2t + 1)` of same-scene views.
pub fn loss_gradients(
    head: &HeadParams,
    inputs: &[&[f32]],
    tau: f64,
) -> Result<(f64, HeadGradients)> {
    for x in inputs {
        if x.len() != head.input_dim() {
            return Err(TrainError::DimensionMismatch {
                expected: head.input_dim(),
                actual: x.len(),
            });
        }
    }
    let traces: Vec<_> = inputs.iter().map(|x| head.trace(x)).collect();
    let projections: Vec<&[f64]> = traces.iter().map(|t| t.proj.as_slice()).collect();
    let (loss, d_proj) = nt_xent_with_grad(&projections, tau)?;
    let mut grads = HeadGradients::zeros_like(head);
    for (t, d) in traces.iter().zip(&d_proj) {
        head.backward(t, d, &mut grads);
    }
    Ok((loss, grads))
}

/// Loss only (no backward pass).
pub fn batch_loss(head: &HeadParams, inputs: &[&[f32]], tau: f64) -> Result<f64> {
    for x in inputs {
        if x.len() != head.input_dim() {
            return Err(TrainError::DimensionMismatch {
                expected: head.input_dim(),
                actual: x.len(),
            });
        }
    }
    let projections: Vec<Vec<f64>> = inputs.iter().map(|x| head.trace(x).proj).collect();
    nt_xent_loss(&projections, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub batches: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: HeadParams,
    pub trajectory: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.trajectory.first().map(|e| e.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trajectory.last().map(|e| e.mean_loss)
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("epoch,batches,mean_loss\n");
        for e in &self.trajectory {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.batches, e.mean_loss));
        }
        out
    }
}

/// Trains a head on the training views of `split`.
///
/// Each epoch shuffles the scenes and walks them in chunks of
/// `batch_scenes`; a trailing chunk with fewer than two scenes is skipped.
/// For each scene in a batch two distinct training views are drawn.
pub fn train(dataset: &Dataset, split: &SplitSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.batch_scenes > split.scenes.len() {
        return Err(TrainError::BatchTooLarge {
            batch_scenes: config.batch_scenes,
            scenes: split.scenes.len(),
        });
    }
    // Training vectors, per scene.
    let mut views: Vec<Vec<Vec<f32>>> = Vec::with_capacity(split.scenes.len());
    for s in &split.scenes {
        let unique: HashSet<&String> = s.train_views.iter().collect();
        if unique.len() < 2 {
            return Err(TrainError::TooFewTrainViews {
                scene_id: s.scene_id.clone(),
                available: unique.len(),
            });
        }
        views.push(
            s.train_views
                .iter()
                .map(|v| {
                    dataset
                        .vector_by_key(&s.scene_id, v)
                        .map(|c| c.into_owned())
                })
                .collect::<std::result::Result<_, _>>()?,
        );
    }

    let mut head = init_head(config, dataset.dim())?;
    let mut rng = seed::rng(seed::derive(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut trajectory = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_scenes).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut inputs: Vec<&[f32]> = Vec::with_capacity(2 * chunk.len());
            for &s in chunk {
                let pick = index::sample(&mut rng, views[s].len(), 2);
                inputs.push(&views[s][pick.index(0)]);
                inputs.push(&views[s][pick.index(1)]);
            }
            let (loss, grads) = loss_gradients(&head, &inputs, config.tau)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    what: "loss or gradient",
                });
            }
            head.apply_step(&grads, config.lr);
            if !head.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    what: "parameters",
                });
            }
            total += loss;
            batches += 1;
        }
        trajectory.push(EpochLoss {
            epoch,
            batches,
            mean_loss: if batches > 0 {
                total / batches as f64
            } else {
                f64::NAN
            },
        });
    }
    Ok(TrainOutcome { head, trajectory })
}
