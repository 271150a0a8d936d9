//! NT-Xent (normalised temperature-scaled cross entropy).
//!
//! A batch holds `2N` projections where items `2t` and `2t + 1` are two views
//! of the same scene. For an anchor `i` with positive `j`,
//!
//! ```text
//! ℓ(i, j) = −log( exp(s_ij / τ) / Σ_{k ≠ i} exp(s_ik / τ) )
//! ```
//!
//! with `s` the cosine similarity. The denominator runs over every other item,
//! the positive included. The batch loss is the mean over all `2N` ordered
//! positive pairs.

use super::TrainError;

fn validate<V: AsRef<[f64]>>(z: &[V], tau: f64) -> Result<(), TrainError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(TrainError::InvalidConfig(format!(
            "tau must be positive, got {tau}"
        )));
    }
    if z.len() < 4 || !z.len().is_multiple_of(2) {
        return Err(TrainError::InvalidBatch(format!(
            "need an even number of items and at least two pairs, got {}",
            z.len()
        )));
    }
    let dim = z[0].as_ref().len();
    if z.iter().any(|v| v.as_ref().len() != dim) {
        return Err(TrainError::InvalidBatch(
            "projections differ in length".into(),
        ));
    }
    Ok(())
}

fn unit_rows<V: AsRef<[f64]>>(z: &[V]) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
    let mut units = Vec::with_capacity(z.len());
    let mut norms = Vec::with_capacity(z.len());
    for (i, v) in z.iter().enumerate() {
        let v = v.as_ref();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(TrainError::ZeroProjection(i));
        }
        units.push(v.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Row-wise softmax over `k ≠ i` of `sim[i][k] / τ`, plus the per-anchor losses.
fn softmax_rows(units: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let m = units.len();
    let mut logits = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for k in i + 1..m {
            let s = units[i]
                .iter()
                .zip(&units[k])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / tau;
            logits[i][k] = s;
            logits[k][i] = s;
        }
    }
    let mut probs = vec![vec![0.0f64; m]; m];
    let mut losses = Vec::with_capacity(m);
    for i in 0..m {
        let max = (0..m)
            .filter(|&k| k != i)
            .map(|k| logits[i][k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in (0..m).filter(|&k| k != i) {
            let e = (logits[i][k] - max).exp();
            probs[i][k] = e;
            sum += e;
        }
        probs[i].iter_mut().for_each(|p| *p /= sum);
        let lse = max + sum.ln();
        losses.push(lse - logits[i][i ^ 1]);
    }
    (probs, losses)
}

/// Batch NT-Xent loss over projections `z`.
pub fn nt_xent_loss<V: AsRef<[f64]>>(z: &[V], tau: f64) -> Result<f64, TrainError> {
    validate(z, tau)?;
    let (units, _) = unit_rows(z)?;
    let (_, losses) = softmax_rows(&units, tau);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss and its gradient with respect to every projection.
pub fn nt_xent_with_grad<V: AsRef<[f64]>>(
    z: &[V],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    validate(z, tau)?;
    let (units, norms) = unit_rows(z)?;
    let (probs, losses) = softmax_rows(&units, tau);
    let m = units.len();
    let inv = 1.0 / m as f64;

    // g[i][k] = ∂L/∂s_ik (s_ik = cosine, before the 1/τ scaling).
    let mut g = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for k in (0..m).filter(|&k| k != i) {
            let target = if k == (i ^ 1) { 1.0 } else { 0.0 };
            g[i][k] = inv * (probs[i][k] - target) / tau;
        }
    }
    let dim = units[0].len();
    let mut grads = Vec::with_capacity(m);
    for i in 0..m {
        // s_ik = s_ki, so u_i receives both g[i][k] and g[k][i].
        let mut du = vec![0.0f64; dim];
        for k in (0..m).filter(|&k| k != i) {
            let c = g[i][k] + g[k][i];
            du.iter_mut().zip(&units[k]).for_each(|(d, u)| *d += c * u);
        }
        // Through u = z / |z|: (I − u uᵀ) du / |z|.
        let radial = du.iter().zip(&units[i]).map(|(a, b)| a * b).sum::<f64>();
        grads.push(
            du.iter()
                .zip(&units[i])
                .map(|(d, u)| (d - radial * u) / norms[i])
                .collect(),
        );
    }
    Ok((losses.iter().sum::<f64>() * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct evaluation of the per-pair formula, one exp per term.
    fn oracle(z: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
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
            total += -(num / den).ln();
        }
        total / m as f64
    }

    #[test]
    fn identical_projections_give_log_2n_minus_1() {
        for n in 2..6 {
            let z = vec![vec![0.3, -1.2, 2.0]; 2 * n];
            let loss = nt_xent_loss(&z, 0.7).unwrap();
            assert!((loss - ((2 * n - 1) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pairs_tau_one() {
        let z = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((nt_xent_loss(&z, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = crate::seed::rng(17);
        for _ in 0..20 {
            let m = 2 * rng.random_range(2..6);
            let z: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let tau = rng.random_range(0.1..2.0);
            assert!((nt_xent_loss(&z, tau).unwrap() - oracle(&z, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_projections() {
        let mut rng = crate::seed::rng(3);
        let z: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (_, grads) = nt_xent_with_grad(&z, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            for c in 0..4 {
                let mut plus = z.clone();
                plus[i][c] += h;
                let mut minus = z.clone();
                minus[i][c] -= h;
                let fd = (nt_xent_loss(&plus, 0.5).unwrap() - nt_xent_loss(&minus, 0.5).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grads[i][c]).abs() < 1e-7,
                    "{i},{c}: {fd} vs {}",
                    grads[i][c]
                );
            }
        }
    }

    #[test]
    fn loss_decreases_as_pairs_align_and_negatives_oppose() {
        // Pair t sits at angle θ_t; its two views are spread by `spread`,
        // and the two pairs are pushed apart.
        let batch = |spread: f64| {
            let v = |a: f64| vec![a.cos(), a.sin()];
            vec![
                v(spread),
                v(-spread),
                v(std::f64::consts::PI + spread),
                v(std::f64::consts::PI - spread),
            ]
        };
        let mut prev = f64::INFINITY;
        for spread in [1.4, 1.0, 0.6, 0.3, 0.1, 0.0] {
            let l = nt_xent_loss(&batch(spread), 0.1).unwrap();
            assert!(l > 0.0 && l < prev, "spread {spread}: {l} !< {prev}");
            prev = l;
        }
    }

    #[test]
    fn invalid_batches() {
        assert!(matches!(
            nt_xent_loss(&[vec![1.0], vec![1.0]], 0.5),
            Err(TrainError::InvalidBatch(_))
        ));
        assert!(matches!(
            nt_xent_loss(&vec![vec![1.0]; 5], 0.5),
            Err(TrainError::InvalidBatch(_))
        ));
        assert!(matches!(
            nt_xent_loss(&vec![vec![1.0]; 4], 0.0),
            Err(TrainError::InvalidConfig(_))
        ));
        let z = vec![
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ];
        assert!(matches!(
            nt_xent_loss(&z, 0.5),
            Err(TrainError::ZeroProjection(1))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (2usize..5)
                .prop_flat_map(|n| {
                    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2 * n)
                })
                .prop_filter("nonzero rows", |z| {
                    z.iter()
                        .all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
                })
        }

        proptest! {
            #[test]
            fn invariant_under_rotation(z in batch(), a in 0.0f64..std::f64::consts::TAU, b in 0.0f64..std::f64::consts::TAU) {
                // Rotation in the (0,1) plane followed by one in the (1,2) plane.
                let rot = |v: &Vec<f64>| {
                    let (x, y) = (a.cos() * v[0] - a.sin() * v[1], a.sin() * v[0] + a.cos() * v[1]);
                    let (y2, w) = (b.cos() * y - b.sin() * v[2], b.sin() * y + b.cos() * v[2]);
                    vec![x, y2, w]
                };
                let rotated: Vec<_> = z.iter().map(rot).collect();
                let l0 = nt_xent_loss(&z, 0.5).unwrap();
                let l1 = nt_xent_loss(&rotated, 0.5).unwrap();
                prop_assert!((l0 - l1).abs() < 1e-10);
            }

            #[test]
            fn invariant_under_per_item_rescaling(z in batch(), scales in prop::collection::vec(0.01f64..100.0, 8)) {
                let scaled: Vec<Vec<f64>> = z.iter().zip(scales.iter().cycle())
                    .map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
                let l0 = nt_xent_loss(&z, 0.3).unwrap();
                let l1 = nt_xent_loss(&scaled, 0.3).unwrap();
                prop_assert!(l0 > 0.0);
                prop_assert!((l0 - l1).abs() < 1e-10);
            }
        }
    }
}
