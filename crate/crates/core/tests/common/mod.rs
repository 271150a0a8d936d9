//! Independent oracles and shared fixtures for integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use sceneret::harness::{DataSource, EncoderStage, ExperimentConfig, SplitConfig};
use sceneret::store::{SplitMode, SynthParams};
use sceneret::trainer::{Activation, HeadParams, TrainConfig};

/// Full ranking by a double loop in f64 straight from the stored f32 rows:
/// `(entry, score)` by descending score, ties by ascending entry.
pub fn oracle_ranking(rows: &[Vec<f32>], q: &[f32]) -> Vec<(usize, f64)> {
    let qn: f64 = q
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let mut dot = 0.0f64;
        let mut rn = 0.0f64;
        for j in 0..r.len() {
            dot += f64::from(r[j]) * f64::from(q[j]);
            rn += f64::from(r[j]) * f64::from(r[j]);
        }
        out.push((i, dot / (rn.sqrt() * qn)));
    }
    for a in 0..out.len() {
        for b in a + 1..out.len() {
            let (ia, sa) = out[a];
            let (ib, sb) = out[b];
            if sb > sa || (sb == sa && ib < ia) {
                out.swap(a, b);
            }
        }
    }
    out
}

/// Head forward pass written as explicit matrix arithmetic. Returns the
/// projection and the sign of every trunk pre-activation feeding a ReLU.
pub fn oracle_forward(head: &HeadParams, x: &[f32]) -> (Vec<f64>, Vec<bool>) {
    let mut a: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let mut pattern = Vec::new();
    let n = head.trunk.len();
    for (l, layer) in head.trunk.iter().enumerate() {
        let mut y = vec![0.0f64; layer.output];
        for o in 0..layer.output {
            let mut s = f64::from(layer.bias[o]);
            for i in 0..layer.input {
                s += f64::from(layer.weight[o * layer.input + i]) * a[i];
            }
            y[o] = s;
        }
        if l + 1 < n && head.activation == Activation::Relu {
            for v in &mut y {
                pattern.push(*v > 0.0);
                *v = v.max(0.0);
            }
        }
        a = y;
    }
    let p = &head.projection;
    let mut z = vec![0.0f64; p.output];
    for o in 0..p.output {
        let mut s = f64::from(p.bias[o]);
        for i in 0..p.input {
            s += f64::from(p.weight[o * p.input + i]) * a[i];
        }
        z[o] = s;
    }
    (z, pattern)
}

/// NT-Xent by direct summation: pairs `(2t, 2t + 1)`, denominator over all
/// `k ≠ i`, mean over every anchor.
pub fn oracle_nt_xent(z: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let m = z.len();
    let mut total = 0.0;
    for i in 0..m {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let num = (cos(&z[i], &z[j]) / tau).exp();
        let den: f64 = (0..m)
            .filter(|&k| k != i)
            .map(|k| (cos(&z[i], &z[k]) / tau).exp())
            .sum();
        total -= (num / den).ln();
    }
    total / m as f64
}

/// Loss of `head` on `inputs` through the oracle forward pass, with the
/// concatenated ReLU pattern.
pub fn oracle_head_loss(head: &HeadParams, inputs: &[Vec<f32>], tau: f64) -> (f64, Vec<bool>) {
    let mut z = Vec::new();
    let mut pattern = Vec::new();
    for x in inputs {
        let (p, s) = oracle_forward(head, x);
        z.push(p);
        pattern.extend(s);
    }
    (oracle_nt_xent(&z, tau), pattern)
}

/// Synthetic data where the scene signal is weak against nuisance noise.
pub fn hard_data(seed: u64) -> SynthParams {
    SynthParams {
        n_scenes: 100,
        views_per_scene: 20,
        dim: 64,
        sigma: 1.0,
        nuisance_dims: 48,
        seed,
    }
}

/// Head settings for the hard fixture.
pub fn hard_train_config() -> TrainConfig {
    TrainConfig {
        tau: 0.5,
        batch_scenes: 32,
        lr: 0.5,
        epochs: 100,
        trunk_depth: 2,
        hidden_width: 128,
        representation_dim: 64,
        projection_dim: 32,
        ..TrainConfig::default()
    }
}

pub fn hard_experiment(seed: u64, k_db: usize, mode: SplitMode, trained: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        DataSource::Synth(hard_data(seed)),
        SplitConfig {
            k_train: 10,
            k_db,
            k_query: 1,
            mode,
            file: None,
        },
    );
    cfg.seed = seed;
    if trained {
        cfg.encoder = EncoderStage::Trained(hard_train_config());
    }
    cfg
}
