//! Clean training (one-hot MSE on mean firing rates) and evaluation.

use super::{batch_frames, Capture, ForwardOpts, SpikingNet};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::events::Dataset;
use crate::tensor::{adam_step, backward, mse_loss, AdamParams, AdamState, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 16,
            lr: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub type FitMetrics = Vec<EpochMetrics>;

// rng stream tags
const SHUFFLE: u64 = 0x5F;
const DROPOUT: u64 = 0xD0;

fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = S::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data).expect("one_hot shape")
}

/// Minimizes mean MSE between firing rates and one-hot labels over shuffled
/// minibatches. LIF states reset per sample; deterministic given the seed.
/// Per-epoch accuracy is measured on `eval` when given, else on the
/// training set.
pub fn fit<S: Scalar>(
    net: &mut SpikingNet<S>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<FitMetrics> {
    let mut state = AdamState::new(&net.params());
    fit_resume(net, train, eval, cfg, &mut state, 0)
}

/// Continues training from `start_epoch` with an existing optimizer state;
/// the per-epoch RNG streams are derived statelessly from (seed, epoch) so a
/// resumed run reproduces the uninterrupted one exactly.
pub fn fit_resume<S: Scalar>(
    net: &mut SpikingNet<S>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    opt_state: &mut AdamState<S>,
    start_epoch: usize,
) -> Result<FitMetrics> {
    cfg.validate()?;
    train.validate()?;
    if train.num_classes != net.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, net {}",
            train.num_classes, net.num_classes
        )));
    }
    let hp = AdamParams::with_lr(cfg.lr);
    let n = train.len();
    let mut metrics = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let frames: Vec<&crate::events::FrameTensor> =
                chunk.iter().map(|&i| &train.samples[i].frames).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let inputs = batch_frames::<S>(&frames)?;
            let targets = one_hot::<S>(&labels, net.num_classes);

            let tape = Tape::new();
            let out = net.forward_frames(
                &inputs,
                ForwardOpts {
                    tape: Some(&tape),
                    train: true,
                    smooth: false,
                    dropout_seed: derive_seed(cfg.seed, DROPOUT, (epoch * 1_000_000 + bi) as u64),
                },
                Capture::default(),
            )?;
            let loss = mse_loss(&out.rates, &targets).map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged {
                    epoch,
                    batch: bi,
                    detail: d,
                },
                other => other,
            })?;
            loss_sum += loss.item()?.into_f64() * chunk.len() as f64;

            let grads = backward(&loss)?;
            let bound = out.bound.expect("tracked forward returns bindings");
            let grad_vecs: Vec<Vec<S>> = bound
                .iter()
                .map(|p| grads.wrt(p))
                .collect::<Result<_>>()?;
            let updated = adam_step(&net.params(), &grad_vecs, opt_state, hp)?;
            net.set_params(updated)?;
        }

        let accuracy = match eval {
            Some(ds) => evaluate(net, ds)?,
            None => evaluate(net, train)?,
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / n as f64,
            accuracy,
        });
    }
    Ok(metrics)
}

/// Predicted class per sample: argmax of the firing rates (lowest index on
/// ties). Deterministic; dropout disabled.
pub fn predict<S: Scalar>(net: &SpikingNet<S>, dataset: &Dataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(CHUNK) {
        let frames: Vec<&crate::events::FrameTensor> = chunk.iter().map(|s| &s.frames).collect();
        let inputs = batch_frames::<S>(&frames)?;
        let res = net.forward_frames(&inputs, ForwardOpts::default(), Capture::default())?;
        let c = net.num_classes;
        for bi in 0..chunk.len() {
            let row = &res.rates.data()[bi * c..(bi + 1) * c];
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate<S: Scalar>(net: &SpikingNet<S>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(net, dataset)?;
    let correct = preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{synth_dataset, SynthConfig};
    use crate::snn::NetConfig;

    fn tiny_data() -> (Dataset, Dataset) {
        synth_dataset(
            &SynthConfig {
                height: 16,
                width: 16,
                frames: 6,
                shape_side: 3,
                step: 2,
                noise: 0.0,
                n_train: 16,
                n_test: 8,
            },
            42,
        )
        .unwrap()
    }

    fn tiny_net(seed: u64) -> SpikingNet<f32> {
        SpikingNet::build(
            &NetConfig {
                conv_channels: vec![4],
                ..Default::default()
            },
            (2, 16, 16),
            4,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn fit_is_deterministic() {
        let (train, _) = tiny_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 4,
            lr: 0.001,
            seed: 9,
        };
        let mut a = tiny_net(1);
        let mut b = tiny_net(1);
        let ma = fit(&mut a, &train, None, &cfg).unwrap();
        let mb = fit(&mut b, &train, None, &cfg).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
        assert_eq!(ma.len(), mb.len());
        for (x, y) in ma.iter().zip(&mb) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.accuracy, y.accuracy);
        }
    }

    #[test]
    fn resume_replays_identically() {
        let (train, _) = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 4,
            lr: 0.001,
            seed: 4,
        };
        let mut full = tiny_net(2);
        fit(&mut full, &train, None, &cfg).unwrap();

        // run 2 epochs, then resume for the third
        let mut resumed = tiny_net(2);
        let mut st = AdamState::new(&resumed.params());
        let part = TrainConfig { epochs: 2, ..cfg };
        fit_resume(&mut resumed, &train, None, &part, &mut st, 0).unwrap();
        fit_resume(&mut resumed, &train, None, &cfg, &mut st, 2).unwrap();

        for (pa, pb) in full.params().iter().zip(resumed.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn evaluate_counts_balanced_stub() {
        // An untrained net with zeroed output weights predicts class 0 for
        // everything (argmax tie-break), giving 0.25 on a balanced set.
        let (_, test) = tiny_data();
        let mut net = tiny_net(3);
        let zeroed: Vec<Tensor<f32>> = net
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        net.set_params(zeroed).unwrap();
        let acc = evaluate(&net, &test).unwrap();
        assert!((acc - 0.25).abs() < 1e-9);
    }

    #[test]
    fn accuracy_invariant_to_sample_order() {
        let (train, _) = tiny_data();
        let net = tiny_net(5);
        let a = evaluate(&net, &train).unwrap();
        let mut reversed = train.clone();
        reversed.samples.reverse();
        let b = evaluate(&net, &reversed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_composition_does_not_change_predictions() {
        let (train, _) = tiny_data();
        let net = tiny_net(6);
        let full = predict(&net, &train).unwrap();
        let single: Vec<usize> = train
            .samples
            .iter()
            .map(|s| {
                let ds = Dataset {
                    samples: vec![s.clone()],
                    num_classes: train.num_classes,
                    dims: train.dims,
                    seed: 0,
                };
                predict(&net, &ds).unwrap()[0]
            })
            .collect();
        assert_eq!(full, single);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (train, _) = tiny_data();
        let net = tiny_net(7);
        let empty = Dataset {
            samples: vec![],
            num_classes: 4,
            dims: train.dims,
            seed: 0,
        };
        assert!(matches!(evaluate(&net, &empty), Err(Error::EmptyDataset)));
    }
}
