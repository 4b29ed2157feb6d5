//! STRIP: superpose a candidate with clean samples frame by frame and flag
//! low prediction entropy.

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::events::{Dataset, FrameTensor, Sample};
use crate::snn::{batch_frames, Capture, ForwardOpts, SpikingNet};
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RATE_FLOOR: f64 = 1e-9;

/// Normalized prediction entropy of a rate vector: rates are floored at
/// 1e-9, normalized to a probability vector, and the Shannon entropy is
/// divided by log(num_classes).
pub fn normalized_entropy(rates: &[f64]) -> f64 {
    let floored: Vec<f64> = rates.iter().map(|r| r.max(RATE_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    let mut h = 0.0;
    for r in &floored {
        let p = r / total;
        h -= p * p.ln();
    }
    h / (rates.len() as f64).ln()
}

/// Frame-by-frame superposition: elementwise sum clamped to [0, 1].
pub fn superpose(a: &FrameTensor, b: &FrameTensor) -> Result<FrameTensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension {
            axis: "superpose",
            detail: format!("dims {:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x + y).min(1.0))
        .collect();
    FrameTensor::from_data(a.dims(), data, true)
}

/// Mean normalized entropy of the net's predictions over `n_overlays`
/// seeded superpositions of the candidate with pool samples.
pub fn strip_score<S: Scalar>(
    net: &SpikingNet<S>,
    candidate: &FrameTensor,
    pool: &Dataset,
    n_overlays: usize,
    seed: u64,
) -> Result<f64> {
    if pool.len() < n_overlays || n_overlays == 0 {
        return Err(Error::Config(format!(
            "overlay pool of {} cannot supply {} overlays",
            pool.len(),
            n_overlays
        )));
    }
    if !candidate.is_normalized() {
        return Err(Error::Config("strip_score requires normalized frames".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x57B1, 0));
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n_overlays);

    let mixed: Vec<FrameTensor> = picks
        .iter()
        .map(|i| superpose(candidate, &pool.samples[i].frames))
        .collect::<Result<_>>()?;
    let refs: Vec<&FrameTensor> = mixed.iter().collect();
    let inputs = batch_frames::<S>(&refs)?;
    let out = net.forward_frames(&inputs, ForwardOpts::default(), Capture::default())?;

    let c = net.num_classes;
    let mut total = 0.0;
    for bi in 0..n_overlays {
        let rates: Vec<f64> = out.rates.data()[bi * c..(bi + 1) * c]
            .iter()
            .map(|v| v.into_f64())
            .collect();
        total += normalized_entropy(&rates);
    }
    Ok(total / n_overlays as f64)
}

/// Detection threshold: the k-th smallest clean score with
/// k = max(1, ceil(frr * n)). Samples scoring strictly below are flagged.
pub fn frr_threshold(scores: &[f64], frr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&frr) {
        return Err(Error::Config(format!("frr {} outside [0,1)", frr)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((frr * scores.len() as f64).ceil() as usize).max(1);
    Ok(sorted[k - 1])
}

#[derive(Clone, Debug)]
pub struct EntropyReport {
    pub frr: f64,
    pub threshold: f64,
    pub clean_scores: Vec<f64>,
    pub stream_scores: Vec<f64>,
    /// One flag per test-stream sample: true = flagged as backdoored.
    pub flagged: Vec<bool>,
}

impl EntropyReport {
    pub fn flagged_fraction(&self) -> f64 {
        self.flagged.iter().filter(|f| **f).count() as f64 / self.flagged.len().max(1) as f64
    }
}

/// Calibrates the entropy threshold on a clean holdout at the requested
/// false-rejection rate, then screens the test stream.
pub fn strip_screen<S: Scalar>(
    net: &SpikingNet<S>,
    holdout: &Dataset,
    stream: &[Sample],
    frr: f64,
    n_overlays: usize,
    seed: u64,
) -> Result<EntropyReport> {
    holdout.validate()?;
    let clean_scores: Vec<f64> = holdout
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| strip_score(net, &s.frames, holdout, n_overlays, derive_seed(seed, 1, i as u64)))
        .collect::<Result<_>>()?;
    let threshold = frr_threshold(&clean_scores, frr)?;
    let stream_scores: Vec<f64> = stream
        .iter()
        .enumerate()
        .map(|(i, s)| strip_score(net, &s.frames, holdout, n_overlays, derive_seed(seed, 2, i as u64)))
        .collect::<Result<_>>()?;
    let flagged = stream_scores.iter().map(|s| *s < threshold).collect();
    Ok(EntropyReport {
        frr,
        threshold,
        clean_scores,
        stream_scores,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rates_have_unit_entropy() {
        let h = normalized_entropy(&[0.25, 0.25, 0.25, 0.25]);
        assert!((h - 1.0).abs() < 1e-9, "h = {}", h);
        // scale-invariant in the rates
        let h2 = normalized_entropy(&[0.8, 0.8, 0.8, 0.8]);
        assert!((h2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_rates_have_near_zero_entropy() {
        let h = normalized_entropy(&[1.0, 0.0, 0.0, 0.0]);
        assert!(h.abs() < 1e-6, "h = {}", h);
    }

    #[test]
    fn all_zero_rates_fall_back_to_uniform() {
        let h = normalized_entropy(&[0.0, 0.0, 0.0, 0.0]);
        assert!((h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_second_smallest_at_one_percent_of_200() {
        // 200 scores 1..=200; frr = 0.01 -> k = 2 -> second smallest = 2.0
        let scores: Vec<f64> = (1..=200).map(|v| v as f64).collect();
        let t = frr_threshold(&scores, 0.01).unwrap();
        assert_eq!(t, 2.0);
    }

    #[test]
    fn threshold_floors_at_smallest() {
        let scores = vec![5.0, 1.0, 3.0];
        assert_eq!(frr_threshold(&scores, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn superpose_clamps_at_one() {
        let a = FrameTensor::from_data((1, 2, 1, 1), vec![0.7, 0.2], true).unwrap();
        let b = FrameTensor::from_data((1, 2, 1, 1), vec![0.6, 0.1], true).unwrap();
        let s = superpose(&a, &b).unwrap();
        assert_eq!(s.data(), &[1.0, 0.30000001]);
    }
}
