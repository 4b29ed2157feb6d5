//! Spectral signatures: score target-label samples by their squared
//! projection onto the top singular direction of centered penultimate
//! features, drop the top scorers, retrain from scratch.

use crate::error::{Error, Result};
use crate::events::{Dataset, FrameTensor};
use crate::snn::{batch_frames, Capture, ForwardOpts, SpikingNet, TrainConfig};
use crate::tensor::Scalar;

pub const POWER_TOLERANCE: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 1000;

/// Top right-singular direction of a centered feature matrix (rows =
/// samples) by power iteration on M^T M. Returns a unit vector, or zeros
/// when the matrix is identically zero.
pub fn power_iteration(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    if rows.is_empty() || dim == 0 {
        return vec![0.0; dim];
    }
    // deterministic start vector spread over all coordinates
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 + 0.1 * ((i % 7) as f64) + 0.01 * ((i % 13) as f64))
        .collect();
    normalize(&mut v);
    let mut prev = v.clone();
    for _ in 0..POWER_MAX_ITERS {
        // u = M v (length n), then w = M^T u (length dim)
        let mut w = vec![0.0; dim];
        for row in rows {
            let mut dot = 0.0;
            for (a, b) in row.iter().zip(&v) {
                dot += a * b;
            }
            for (wi, a) in w.iter_mut().zip(row) {
                *wi += dot * a;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return vec![0.0; dim];
        }
        for wi in &mut w {
            *wi /= norm;
        }
        // convergence up to sign
        let agreement: f64 = w.iter().zip(&prev).map(|(a, b)| a * b).sum::<f64>().abs();
        prev = w.clone();
        v = w;
        if (1.0 - agreement).abs() < POWER_TOLERANCE {
            break;
        }
    }
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Centers rows by their mean and scores each by the squared projection
/// onto the top singular direction.
pub fn spectral_scores(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "spectral signatures need at least 2 target-label samples, got {}",
            n
        )));
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for row in features {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let dir = power_iteration(&centered, dim);
    Ok(centered
        .iter()
        .map(|row| {
            let p: f64 = row.iter().zip(&dir).map(|(a, b)| a * b).sum();
            p * p
        })
        .collect())
}

/// Indices removed at the given percentile: every sample whose score reaches
/// the nearest-rank percentile value, resolved by (score desc, index asc)
/// tie order so the removal count is exactly n - ceil(p/100 * n) + 1.
pub fn removal_set(scores: &[f64], percentile: f64) -> Vec<usize> {
    let n = scores.len();
    let keep_rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    let k = n - keep_rank.min(n) + 1;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut removed: Vec<usize> = order.into_iter().take(k).collect();
    removed.sort_unstable();
    removed
}

#[derive(Debug)]
pub struct SpectralOutcome<S: Scalar> {
    /// Dataset indices of the scored (target-label) samples.
    pub target_indices: Vec<usize>,
    /// Outlier score per scored sample, aligned with `target_indices`.
    pub scores: Vec<f64>,
    /// Dataset indices removed before retraining.
    pub removed: Vec<usize>,
    /// (clean accuracy, ASR) before the defense.
    pub pre: (f64, f64),
    /// (clean accuracy, ASR) after retraining on the filtered set.
    pub post: (f64, f64),
    pub retrained: SpikingNet<S>,
}

/// Time-averaged penultimate features of the given samples.
fn collect_features<S: Scalar>(
    net: &SpikingNet<S>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let frames: Vec<&FrameTensor> = chunk.iter().map(|&i| &dataset.samples[i].frames).collect();
        let inputs = batch_frames::<S>(&frames)?;
        let res = net.forward_frames(
            &inputs,
            ForwardOpts::default(),
            Capture {
                penultimate: true,
                conv_rates: false,
            },
        )?;
        let feats = res.penultimate.ok_or_else(|| {
            Error::Config("net has no linear layer to capture features from".to_string())
        })?;
        let width = res.penultimate_width;
        for bi in 0..chunk.len() {
            out.push(feats[bi * width..(bi + 1) * width].to_vec());
        }
    }
    Ok(out)
}

/// Runs the full spectral-signature defense against a poisoned training set:
/// scores the samples labeled `target_label`, removes the top scorers at the
/// percentile cutoff, retrains a fresh net (from `rebuild`) on the remainder
/// with the original config, and reports before/after clean accuracy and ASR.
#[allow(clippy::too_many_arguments)]
pub fn spectral_filter<S: Scalar>(
    net: &SpikingNet<S>,
    poisoned_train: &Dataset,
    eval: &Dataset,
    trigger: &dyn Fn(&FrameTensor, usize) -> Result<FrameTensor>,
    rebuild: &dyn Fn() -> Result<SpikingNet<S>>,
    train_cfg: &TrainConfig,
    target_label: usize,
    percentile: f64,
) -> Result<SpectralOutcome<S>> {
    poisoned_train.validate()?;
    let target_indices: Vec<usize> = poisoned_train
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == target_label)
        .map(|(i, _)| i)
        .collect();
    let features = collect_features(net, poisoned_train, &target_indices)?;
    let scores = spectral_scores(&features)?;
    let removed_local = removal_set(&scores, percentile);
    let removed: Vec<usize> = removed_local.iter().map(|&i| target_indices[i]).collect();

    let pre = (
        crate::snn::evaluate(net, eval)?,
        crate::metrics::asr(net, eval, trigger, target_label)?,
    );

    let keep: std::collections::BTreeSet<usize> = removed.iter().cloned().collect();
    let filtered = Dataset {
        samples: poisoned_train
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !keep.contains(i))
            .map(|(_, s)| s.clone())
            .collect(),
        num_classes: poisoned_train.num_classes,
        dims: poisoned_train.dims,
        seed: poisoned_train.seed,
    };
    let mut retrained = rebuild()?;
    crate::snn::fit(&mut retrained, &filtered, Some(eval), train_cfg)?;
    let post = (
        crate::snn::evaluate(&retrained, eval)?,
        crate::metrics::asr(&retrained, eval, trigger, target_label)?,
    );

    Ok(SpectralOutcome {
        target_indices,
        scores,
        removed,
        pre,
        post,
        retrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planted_cluster_is_removed() {
        // cluster A at the origin, cluster B (20%) shifted by +10 sigma
        // along a fixed axis; at the 85th percentile at least 80% of B goes.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 16;
        let n = 100;
        let mut rows = Vec::new();
        for i in 0..n {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
            if i % 5 == 0 {
                row[3] += 10.0;
            }
            rows.push(row);
        }
        let scores = spectral_scores(&rows).unwrap();
        let removed = removal_set(&scores, 85.0);
        assert_eq!(removed.len(), 16);
        let planted_removed = removed.iter().filter(|i| *i % 5 == 0).count();
        assert!(
            planted_removed as f64 >= 0.8 * 20.0,
            "only {} of 20 planted removed",
            planted_removed
        );
    }

    #[test]
    fn identical_features_fall_back_to_tie_order() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 40];
        let scores = spectral_scores(&rows).unwrap();
        // centering leaves at most rounding residue, identical across rows
        assert!(scores.iter().all(|s| *s < 1e-20), "scores {:?}", &scores[..3]);
        assert!(scores.iter().all(|s| *s == scores[0]));
        let removed = removal_set(&scores, 85.0);
        // n - ceil(0.85 * 40) + 1 = 40 - 34 + 1 = 7, lowest indices first
        assert_eq!(removed, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn scores_invariant_to_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..8).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v + 5.0).collect())
            .collect();
        let a = spectral_scores(&rows).unwrap();
        let b = spectral_scores(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn too_few_target_samples_rejected() {
        assert!(spectral_scores(&[vec![1.0]]).is_err());
    }
}
