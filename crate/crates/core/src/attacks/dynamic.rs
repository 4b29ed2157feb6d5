//! Dynamic trigger: a per-frame convolutional encoder-decoder generates an
//! l-infinity-bounded perturbation, trained jointly with the classifier.
//! The generator weights are shared across the T frames of a sample.

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::events::{Dataset, FrameTensor};
use crate::metrics::asr;
use crate::snn::{batch_frames, Capture, ForwardOpts, SpikingNet, TrainConfig};
use crate::tensor::{
    adam_step, add, backward, channel_affine, clamp, conv2d, conv_transpose2d, mse_loss, scale,
    tanh, AdamParams, AdamState, Scalar, Tape, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-frame convolutional encoder-decoder with tanh output in (-1, 1):
/// two stride-2 conv+affine+tanh stages down, two stride-2 transposed-conv
/// stages up.
#[derive(Clone, Debug)]
pub struct TriggerGenerator<S: Scalar> {
    params: Vec<Tensor<S>>,
    channels: (usize, usize),
    input: (usize, usize, usize),
}

const K_DOWN: usize = 3;
const K_UP: usize = 4;

impl<S: Scalar> TriggerGenerator<S> {
    /// `input` is one frame's (P, H, W); H and W must be divisible by 4.
    pub fn new(input: (usize, usize, usize), channels: (usize, usize), seed: u64) -> Result<Self> {
        let (p, h, w) = input;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "generator needs H and W divisible by 4, got {}x{}",
                h, w
            )));
        }
        let (c1, c2) = channels;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6E0, 0));
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<S> {
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, &mut rng)
        };
        let params = vec![
            // enc1: P -> c1, stride 2
            uniform(&[c1, p, K_DOWN, K_DOWN], p * K_DOWN * K_DOWN),
            Tensor::zeros(&[c1]),
            Tensor::full(&[c1], S::one()),
            Tensor::zeros(&[c1]),
            // enc2: c1 -> c2, stride 2
            uniform(&[c2, c1, K_DOWN, K_DOWN], c1 * K_DOWN * K_DOWN),
            Tensor::zeros(&[c2]),
            Tensor::full(&[c2], S::one()),
            Tensor::zeros(&[c2]),
            // dec1: c2 -> c1 transposed, stride 2 (weight layout Cin,Cout,kh,kw)
            uniform(&[c2, c1, K_UP, K_UP], c2 * K_UP * K_UP),
            Tensor::zeros(&[c1]),
            Tensor::full(&[c1], S::one()),
            Tensor::zeros(&[c1]),
            // dec2: c1 -> P transposed, stride 2, tanh output
            uniform(&[c1, p, K_UP, K_UP], c1 * K_UP * K_UP),
            Tensor::zeros(&[p]),
        ];
        Ok(TriggerGenerator {
            params,
            channels,
            input,
        })
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        self.params.clone()
    }

    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "generator wants {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (slot, t) in self.params.iter_mut().zip(params) {
            if slot.shape() != t.shape() {
                return Err(Error::Dimension {
                    axis: "param",
                    detail: format!("shape {:?} cannot replace {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t.detached();
        }
        Ok(())
    }

    pub fn channels(&self) -> (usize, usize) {
        self.channels
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    /// Raw perturbation for a batch of frames `(B, P, H, W)`, in (-1, 1).
    /// `eff` follows `params()` order; pass watched tensors to train.
    pub fn forward_with_params(&self, x: &Tensor<S>, eff: &[Tensor<S>]) -> Result<Tensor<S>> {
        if eff.len() != self.params.len() {
            return Err(Error::Dimension {
                axis: "params",
                detail: format!("{} effective params, generator has {}", eff.len(), self.params.len()),
            });
        }
        let h = conv2d(x, &eff[0], &eff[1], 2, K_DOWN / 2)?;
        let h = tanh(&channel_affine(&h, &eff[2], &eff[3])?)?;
        let h = conv2d(&h, &eff[4], &eff[5], 2, K_DOWN / 2)?;
        let h = tanh(&channel_affine(&h, &eff[6], &eff[7])?)?;
        let h = conv_transpose2d(&h, &eff[8], &eff[9], 2, 1)?;
        let h = tanh(&channel_affine(&h, &eff[10], &eff[11])?)?;
        let h = conv_transpose2d(&h, &eff[12], &eff[13], 2, 1)?;
        tanh(&h)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_with_params(x, &self.params)
    }
}

/// Applies the generator to one sample: the T frames run as a batch through
/// the shared-weight generator, the perturbation is projected onto the
/// l-infinity ball of radius `gamma`, and the sum is clamped back to [0, 1].
/// Guarantees max|x_hat - x| <= gamma exactly.
pub fn gen_dynamic(
    gen: &TriggerGenerator<f32>,
    x: &FrameTensor,
    gamma: f64,
) -> Result<(FrameTensor, Vec<f32>)> {
    if !x.is_normalized() {
        return Err(Error::Config("gen_dynamic requires normalized frames".to_string()));
    }
    let (t, p, h, w) = x.dims();
    let g = gamma as f32;
    let xt = Tensor::<f32>::from_vec(&[t, p, h, w], x.data().to_vec())?;
    let raw = gen.forward(&xt)?;
    let delta = clamp(&raw, -g, g)?;
    let xhat = clamp(&add(&xt, &delta)?, 0.0, 1.0)?;
    // The f32 addition may overshoot the budget by an ulp; nudge back toward
    // x so max|x_hat - x| <= gamma holds exactly in f32 arithmetic.
    let mut data = xhat.data().to_vec();
    for (v, xv) in data.iter_mut().zip(x.data()) {
        while (*v - xv).abs() > g {
            *v = if *v > *xv { v.next_down() } else { v.next_up() };
        }
    }
    Ok((
        FrameTensor::from_data((t, p, h, w), data, true)?,
        delta.data().to_vec(),
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct DynamicSpec {
    pub alpha: f64,
    pub gamma: f64,
    pub target_label: usize,
}

impl DynamicSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.5..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0.5, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.target_label >= num_classes {
            return Err(Error::Config(format!(
                "target label {} outside {} classes",
                self.target_label, num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DynEpoch {
    pub epoch: usize,
    pub loss_clean: f64,
    pub loss_backdoor: f64,
    pub clean_acc: f64,
    pub asr: f64,
}

impl DynEpoch {
    pub fn score(&self) -> f64 {
        (self.clean_acc + self.asr) / 2.0
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), classes], data).expect("one_hot shape")
}

/// Joint training of classifier and generator. Per batch the classifier
/// parameters are updated on the alpha-weighted clean+backdoor objective
/// with the generator frozen, then the generator is updated on the backdoor
/// objective with the classifier frozen; there is no fine-tuning phase.
/// After the last epoch, net and generator are restored to the epoch that
/// maximized (clean_acc + ASR) / 2 on `eval`.
pub fn train_dynamic(
    net: &mut SpikingNet<f32>,
    gen: &mut TriggerGenerator<f32>,
    train: &Dataset,
    eval: &Dataset,
    spec: &DynamicSpec,
    cfg: &TrainConfig,
) -> Result<(Vec<DynEpoch>, usize)> {
    cfg.validate()?;
    train.validate()?;
    spec.validate(train.num_classes)?;
    let gamma = spec.gamma as f32;
    let alpha = spec.alpha as f32;
    let classes = net.num_classes;
    let hp = AdamParams::with_lr(cfg.lr);
    let mut net_state = AdamState::new(&net.params());
    let mut gen_state = AdamState::new(&gen.params());

    let mut history: Vec<DynEpoch> = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<f32>>, Vec<Tensor<f32>>, usize)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xD1, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_clean_sum = 0.0;
        let mut loss_bd_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let frames: Vec<&FrameTensor> = chunk.iter().map(|&i| &train.samples[i].frames).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.samples[i].label).collect();
            let inputs = batch_frames::<f32>(&frames)?;
            let clean_targets = one_hot(&labels, classes);
            let bd_targets = one_hot(&vec![spec.target_label; chunk.len()], classes);

            // triggered inputs from the current generator, frozen
            let triggered: Vec<Tensor<f32>> = inputs
                .iter()
                .map(|x| {
                    let raw = gen.forward(x)?;
                    let delta = clamp(&raw, -gamma, gamma)?;
                    clamp(&add(x, &delta)?, 0.0, 1.0)
                })
                .collect::<Result<_>>()?;

            // (i) classifier step on alpha * clean + (1 - alpha) * backdoor
            {
                let tape = Tape::new();
                let eff: Vec<Tensor<f32>> = net.params().iter().map(|p| tape.watch(p)).collect();
                let opts = ForwardOpts {
                    tape: Some(&tape),
                    train: true,
                    smooth: false,
                    dropout_seed: derive_seed(cfg.seed, 0xD2, (epoch * 1_000_000 + bi) as u64),
                };
                let out_clean = net.forward_with_params(&inputs, &eff, opts, Capture::default())?;
                let lc = mse_loss(&out_clean.rates, &clean_targets).map_err(|e| diverged(e, epoch, bi))?;
                let loss = if alpha >= 1.0 {
                    lc.clone()
                } else {
                    let out_bd = net.forward_with_params(&triggered, &eff, opts, Capture::default())?;
                    let lb = mse_loss(&out_bd.rates, &bd_targets).map_err(|e| diverged(e, epoch, bi))?;
                    loss_bd_sum += lb.item()?.into_f64() * chunk.len() as f64;
                    add(&scale(&lc, alpha)?, &scale(&lb, 1.0 - alpha)?)?
                };
                loss_clean_sum += lc.item()?.into_f64() * chunk.len() as f64;
                let grads = backward(&loss)?;
                let gvecs: Vec<Vec<f32>> = eff.iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
                let updated = adam_step(&net.params(), &gvecs, &mut net_state, hp)?;
                net.set_params(updated)?;
            }

            // (ii) generator step on the backdoor objective, classifier frozen
            {
                let tape = Tape::new();
                let eff_gen: Vec<Tensor<f32>> = gen.params().iter().map(|p| tape.watch(p)).collect();
                let triggered_tracked: Vec<Tensor<f32>> = inputs
                    .iter()
                    .map(|x| {
                        let raw = gen.forward_with_params(x, &eff_gen)?;
                        let delta = clamp(&raw, -gamma, gamma)?;
                        clamp(&add(x, &delta)?, 0.0, 1.0)
                    })
                    .collect::<Result<_>>()?;
                let net_raw = net.params();
                let opts = ForwardOpts {
                    tape: Some(&tape),
                    train: false,
                    smooth: false,
                    dropout_seed: 0,
                };
                let out = net.forward_with_params(&triggered_tracked, &net_raw, opts, Capture::default())?;
                let loss = mse_loss(&out.rates, &bd_targets).map_err(|e| diverged(e, epoch, bi))?;
                let grads = backward(&loss)?;
                let gvecs: Vec<Vec<f32>> = eff_gen.iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
                let updated = adam_step(&gen.params(), &gvecs, &mut gen_state, hp)?;
                gen.set_params(updated)?;
            }
        }

        let clean_acc = crate::snn::evaluate(net, eval)?;
        let asr_val = asr(
            net,
            eval,
            &|f, _| Ok(gen_dynamic(gen, f, spec.gamma)?.0),
            spec.target_label,
        )?;
        let row = DynEpoch {
            epoch,
            loss_clean: loss_clean_sum / train.len() as f64,
            loss_backdoor: loss_bd_sum / train.len() as f64,
            clean_acc,
            asr: asr_val,
        };
        if best.as_ref().map_or(true, |(s, ..)| row.score() > *s) {
            best = Some((row.score(), net.params(), gen.params(), epoch));
        }
        history.push(row);
    }

    let (_, net_params, gen_params, best_epoch) = best.expect("at least one epoch");
    net.set_params(net_params)?;
    gen.set_params(gen_params)?;
    Ok((history, best_epoch))
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged {
            epoch,
            batch,
            detail,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_frames(seed: u64) -> FrameTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..4 * 2 * 8 * 8).map(|_| rng.gen::<f32>()).collect();
        FrameTensor::from_data((4, 2, 8, 8), data, true).unwrap()
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gen = TriggerGenerator::<f32>::new((2, 8, 8), (4, 6), 3).unwrap();
        let x = Tensor::from_vec(&[2, 2, 8, 8], vec![0.5; 256]).unwrap();
        let d = gen.forward(&x).unwrap();
        assert_eq!(d.shape(), &[2, 2, 8, 8]);
        assert!(d.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn gamma_zero_is_identity() {
        let gen = TriggerGenerator::<f32>::new((2, 8, 8), (4, 6), 1).unwrap();
        let x = tiny_frames(5);
        let (xhat, delta) = gen_dynamic(&gen, &x, 0.0).unwrap();
        assert_eq!(xhat, x);
        assert!(delta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linf_budget_holds_exactly() {
        let gen = TriggerGenerator::<f32>::new((2, 8, 8), (4, 6), 2).unwrap();
        let x = tiny_frames(6);
        for gamma in [0.01, 0.05, 0.1] {
            let (xhat, _) = gen_dynamic(&gen, &x, gamma).unwrap();
            let max_diff = x
                .data()
                .iter()
                .zip(xhat.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(
                max_diff <= gamma as f32,
                "gamma {}: max diff {}",
                gamma,
                max_diff
            );
        }
    }

    #[test]
    fn saturated_generator_clamps_to_gamma() {
        // force a generator that outputs ~1 everywhere via huge output bias
        let mut gen = TriggerGenerator::<f32>::new((2, 8, 8), (4, 6), 4).unwrap();
        let mut p = gen.params();
        let last = p.len() - 1;
        p[last] = Tensor::from_vec(&[2], vec![50.0, 50.0]).unwrap();
        gen.set_params(p).unwrap();
        let x = FrameTensor::from_data((1, 2, 8, 8), vec![0.0; 128], true).unwrap();
        let (xhat, delta) = gen_dynamic(&gen, &x, 0.05).unwrap();
        assert!(delta.iter().all(|v| (*v - 0.05).abs() < 1e-6));
        assert!(xhat.data().iter().all(|v| (*v - 0.05).abs() < 1e-6));
    }

    #[test]
    fn generator_requires_divisible_dims() {
        assert!(TriggerGenerator::<f32>::new((2, 10, 8), (4, 6), 0).is_err());
    }
}
