//! Zero-shot versus trained retrieval on a synthetic dataset where most of
//! each embedding is view-specific noise. Prints the k_db sweep as CSV.
//!
//! cargo run --release --example hard_fixture -- [seeds]

use sceneret::harness::{sweep_kdb, DataSource, EncoderStage, ExperimentConfig, SplitConfig};
use sceneret::store::{SplitMode, SynthParams};
use sceneret::trainer::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(3);
    let mut base = ExperimentConfig::new(
        DataSource::Synth(SynthParams {
            n_scenes: 100,
            views_per_scene: 20,
            dim: 64,
            sigma: 1.0,
            nuisance_dims: 48,
            seed: 0,
        }),
        SplitConfig {
            k_train: 10,
            k_db: 1,
            k_query: 1,
            mode: SplitMode::Seen,
            file: None,
        },
    );
    base.encoder = EncoderStage::Trained(TrainConfig {
        lr: 0.5,
        hidden_width: 128,
        representation_dim: 64,
        projection_dim: 32,
        ..TrainConfig::default()
    });
    let result = sweep_kdb(&base, &[1, 2, 4, 8], seeds)?;
    print!("{}", result.to_csv());
    Ok(())
}
