//! Spiking layers (LIF dynamics with arctan surrogate gradients), the
//! time-unrolled classifier, clean training and evaluation.

mod train;

pub use train::{evaluate, fit, fit_resume, predict, EpochMetrics, FitMetrics, TrainConfig};

use crate::error::{Error, Result};
use crate::events::FrameTensor;
use crate::tensor::{
    add, channel_affine, conv2d, dropout, linear, maxpool2, mean_groups, mul, reshape, scale,
    scale_channels, spike, sub, Scalar, Tape, Tensor,
};
use crate::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Leaky integrate-and-fire parameters. The membrane decays by
/// `1 - 1/tau_mem` per step, integrates its input, fires at `theta` and
/// hard-resets to zero. `surrogate_alpha` sets the sharpness of the arctan
/// surrogate used in the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LifConfig {
    pub theta: f64,
    pub tau_mem: f64,
    pub surrogate_alpha: f64,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            theta: 1.0,
            tau_mem: 2.0,
            surrogate_alpha: 2.0,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::Config(format!("theta {} must be > 0", self.theta)));
        }
        if !(self.tau_mem >= 1.0) {
            return Err(Error::Config(format!("tau_mem {} must be >= 1", self.tau_mem)));
        }
        Ok(())
    }

    pub fn decay(&self) -> f64 {
        1.0 - 1.0 / self.tau_mem
    }
}

/// Membrane potential of one LIF layer; reset to zeros before each sample's
/// frame sequence.
#[derive(Clone, Debug)]
pub struct LifState<S: Scalar> {
    pub v: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            v: Tensor::zeros(shape),
        }
    }
}

/// One LIF step: `v_pre = decay * v + input`, spike where `v_pre >= theta`,
/// hard reset to zero where spiked. With `smooth` the spike is the arctan
/// primitive instead of the step; both modes share the surrogate backward.
pub fn lif_step<S: Scalar>(
    state: &LifState<S>,
    input: &Tensor<S>,
    cfg: &LifConfig,
    smooth: bool,
) -> Result<(Tensor<S>, LifState<S>)> {
    if state.v.shape() != input.shape() {
        return Err(Error::Dimension {
            axis: "membrane",
            detail: format!(
                "state shape {:?} vs input {:?}",
                state.v.shape(),
                input.shape()
            ),
        });
    }
    let decayed = scale(&state.v, S::from_f64(cfg.decay()))?;
    let v_pre = add(&decayed, input)?;
    let s = spike(&v_pre, S::from_f64(cfg.theta), S::from_f64(cfg.surrogate_alpha), smooth)?;
    let v_next = sub(&v_pre, &mul(&v_pre, &s)?)?;
    Ok((s, LifState { v: v_next }))
}

#[derive(Clone, Debug)]
pub struct ConvLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    /// Learnable per-channel affine applied after the convolution.
    pub gain: Tensor<S>,
    pub gbias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
    /// Persistent 0/1 channel mask installed by pruning; `None` = all pass.
    pub mask: Option<Vec<S>>,
}

#[derive(Clone, Debug)]
pub struct LinearLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub enum Layer<S: Scalar> {
    Conv(ConvLayer<S>),
    Linear(LinearLayer<S>),
    Lif(LifConfig),
    MaxPool2,
    Dropout(f64),
    Flatten,
    Voting(usize),
}

/// Architecture family: a stack of conv+affine+LIF+pool blocks, a flatten,
/// optional hidden linear+LIF (with dropout), a final linear+LIF sized
/// `num_classes * votes`, and a voting layer averaging each group of votes.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Stride of the first convolution; later convolutions use stride 1.
    pub conv_stride: usize,
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub votes: usize,
    pub lif: LifConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            conv_channels: vec![12],
            kernel: 3,
            conv_stride: 2,
            hidden: None,
            dropout: 0.0,
            votes: 1,
            lif: LifConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpikingNet<S: Scalar> {
    pub layers: Vec<Layer<S>>,
    pub num_classes: usize,
    pub votes: usize,
    /// (P, H, W) of one input frame.
    pub input_dims: (usize, usize, usize),
}

// Inputs here are sparse event frames (a handful of nonzero cells per
// frame), so fan-in-scaled init leaves membrane potentials far below the
// firing threshold and the first epochs silent. The extra gain keeps the
// initial spike rates in a trainable range, standing in for the batch-norm
// rescaling of the reference architectures.
const INIT_GAIN: f64 = 3.0;

fn kaiming_uniform<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let bound = INIT_GAIN * (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl<S: Scalar> SpikingNet<S> {
    /// Builds the parameterized desk-scale family for `input_dims = (P,H,W)`.
    pub fn build(
        cfg: &NetConfig,
        input_dims: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.lif.validate()?;
        if cfg.votes == 0 {
            return Err(Error::Config("votes must be >= 1".to_string()));
        }
        if cfg.conv_channels.is_empty() {
            return Err(Error::Config("at least one conv block required".to_string()));
        }
        if cfg.kernel == 0 || cfg.conv_stride == 0 {
            return Err(Error::Config("kernel and stride must be >= 1".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA11C, 0));
        let (p, mut h, mut w) = input_dims;
        let mut layers = Vec::new();
        let mut in_ch = p;
        let pad = cfg.kernel / 2;
        for (i, &out_ch) in cfg.conv_channels.iter().enumerate() {
            let stride = if i == 0 { cfg.conv_stride } else { 1 };
            let fan_in = in_ch * cfg.kernel * cfg.kernel;
            layers.push(Layer::Conv(ConvLayer {
                weight: kaiming_uniform(&[out_ch, in_ch, cfg.kernel, cfg.kernel], fan_in, &mut rng),
                bias: Tensor::zeros(&[out_ch]),
                gain: Tensor::full(&[out_ch], S::one()),
                gbias: Tensor::zeros(&[out_ch]),
                stride,
                pad,
                mask: None,
            }));
            layers.push(Layer::Lif(cfg.lif));
            h = (h + 2 * pad - cfg.kernel) / stride + 1;
            w = (w + 2 * pad - cfg.kernel) / stride + 1;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "conv block {} produces odd feature map {}x{}, cannot max-pool",
                    i, h, w
                )));
            }
            layers.push(Layer::MaxPool2);
            h /= 2;
            w /= 2;
            in_ch = out_ch;
        }
        layers.push(Layer::Flatten);
        let mut feat = in_ch * h * w;
        if let Some(hidden) = cfg.hidden {
            if cfg.dropout > 0.0 {
                layers.push(Layer::Dropout(cfg.dropout));
            }
            layers.push(Layer::Linear(LinearLayer {
                weight: kaiming_uniform(&[hidden, feat], feat, &mut rng),
                bias: Tensor::zeros(&[hidden]),
            }));
            layers.push(Layer::Lif(cfg.lif));
            feat = hidden;
        }
        if cfg.dropout > 0.0 {
            layers.push(Layer::Dropout(cfg.dropout));
        }
        let out_width = num_classes * cfg.votes;
        layers.push(Layer::Linear(LinearLayer {
            weight: kaiming_uniform(&[out_width, feat], feat, &mut rng),
            bias: Tensor::zeros(&[out_width]),
        }));
        layers.push(Layer::Lif(cfg.lif));
        layers.push(Layer::Voting(cfg.votes));
        Ok(SpikingNet {
            layers,
            num_classes,
            votes: cfg.votes,
            input_dims,
        })
    }

    /// All trainable tensors in a fixed order (conv: weight, bias, gain,
    /// affine bias; linear: weight, bias).
    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(c.weight.clone());
                    out.push(c.bias.clone());
                    out.push(c.gain.clone());
                    out.push(c.gbias.clone());
                }
                Layer::Linear(l) => {
                    out.push(l.weight.clone());
                    out.push(l.bias.clone());
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        let mut it = params.into_iter();
        let mut take = |shape: &[usize]| -> Result<Tensor<S>> {
            let t = it
                .next()
                .ok_or_else(|| Error::Config("parameter list too short".to_string()))?;
            if t.shape() != shape {
                return Err(Error::Dimension {
                    axis: "param",
                    detail: format!("shape {:?} cannot replace {:?}", t.shape(), shape),
                });
            }
            Ok(t.detached())
        };
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    c.weight = take(c.weight.shape())?;
                    c.bias = take(c.bias.shape())?;
                    c.gain = take(c.gain.shape())?;
                    c.gbias = take(c.gbias.shape())?;
                }
                Layer::Linear(lin) => {
                    lin.weight = take(lin.weight.shape())?;
                    lin.bias = take(lin.bias.shape())?;
                }
                _ => {}
            }
        }
        if it.next().is_some() {
            return Err(Error::Config("parameter list too long".to_string()));
        }
        Ok(())
    }

    /// Index of the last conv layer, if any.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv(_)))
    }

    /// Channel count of the last conv layer.
    pub fn last_conv_channels(&self) -> Option<usize> {
        self.last_conv_index().map(|i| match &self.layers[i] {
            Layer::Conv(c) => c.weight.shape()[0],
            _ => unreachable!(),
        })
    }
}

/// Forward options; the defaults run an untracked, deterministic inference
/// pass with binary spikes.
#[derive(Clone, Copy)]
pub struct ForwardOpts<'t, S: Scalar> {
    pub tape: Option<&'t Tape<S>>,
    pub train: bool,
    pub smooth: bool,
    pub dropout_seed: u64,
}

impl<S: Scalar> Default for ForwardOpts<'_, S> {
    fn default() -> Self {
        ForwardOpts {
            tape: None,
            train: false,
            smooth: false,
            dropout_seed: 0,
        }
    }
}

/// Side captures requested from a forward pass (defense instrumentation).
#[derive(Clone, Copy, Default)]
pub struct Capture {
    /// Time-averaged input of the final linear layer, per sample.
    pub penultimate: bool,
    /// Time- and space-averaged post-LIF rate of the last conv block,
    /// per sample and channel.
    pub conv_rates: bool,
}

pub struct ForwardOutput<S: Scalar> {
    /// (B, num_classes) firing rates in [0, 1].
    pub rates: Tensor<S>,
    /// Watched parameter tensors, in `params()` order, when a tape was given.
    pub bound: Option<Vec<Tensor<S>>>,
    /// (B, F) time-averaged penultimate features, row-major.
    pub penultimate: Option<Vec<f64>>,
    pub penultimate_width: usize,
    /// (B, K) per-channel rates of the last conv block, row-major.
    pub conv_rates: Option<Vec<f64>>,
}

/// Stacks per-sample frame tensors into per-timestep batch tensors
/// (each (B, P, H, W)).
pub fn batch_frames<S: Scalar>(frames: &[&FrameTensor]) -> Result<Vec<Tensor<S>>> {
    let first = frames
        .first()
        .ok_or(Error::EmptyDataset)?;
    let (t, p, h, w) = first.dims();
    let b = frames.len();
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let mut data = Vec::with_capacity(b * p * h * w);
        for f in frames {
            if f.dims() != (t, p, h, w) {
                return Err(Error::Dimension {
                    axis: "batch",
                    detail: format!("sample dims {:?} vs {:?}", f.dims(), (t, p, h, w)),
                });
            }
            let start = f.index(ti, 0, 0, 0);
            data.extend(f.data()[start..start + p * h * w].iter().map(|v| S::from_f64(*v as f64)));
        }
        out.push(Tensor::from_vec(&[b, p, h, w], data)?);
    }
    Ok(out)
}

impl<S: Scalar> SpikingNet<S> {
    /// Applies the net to a frame sequence (one tensor per time step, each
    /// (B, P, H, W)), with persistent LIF state across steps. The output
    /// rate is the mean over steps of the final LIF spikes, then voting
    /// averages each group of `votes` units.
    pub fn forward_frames(
        &self,
        frames: &[Tensor<S>],
        opts: ForwardOpts<'_, S>,
        capture: Capture,
    ) -> Result<ForwardOutput<S>> {
        // Effective parameters: watched on the tape during training.
        let raw = self.params();
        let eff: Vec<Tensor<S>> = match opts.tape {
            Some(tape) => raw.iter().map(|p| tape.watch(p)).collect(),
            None => raw,
        };
        let tracked = opts.tape.is_some();
        let mut out = self.forward_with_params(frames, &eff, opts, capture)?;
        if tracked {
            out.bound = Some(eff);
        }
        Ok(out)
    }

    /// Forward pass with an explicit effective-parameter list (same order as
    /// `params()`). Lets a caller share one set of watched parameters across
    /// several forwards, or run with frozen (untracked) parameters while the
    /// input frames carry gradients.
    pub fn forward_with_params(
        &self,
        frames: &[Tensor<S>],
        eff: &[Tensor<S>],
        opts: ForwardOpts<'_, S>,
        capture: Capture,
    ) -> Result<ForwardOutput<S>> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if eff.len() != self.params().len() {
            return Err(Error::Dimension {
                axis: "params",
                detail: format!("{} effective params, net has {}", eff.len(), self.params().len()),
            });
        }
        let b = frames[0].shape()[0];
        let expected = [b, self.input_dims.0, self.input_dims.1, self.input_dims.2];
        if frames[0].shape() != expected {
            return Err(Error::Dimension {
                axis: "input",
                detail: format!("frame shape {:?}, net expects {:?}", frames[0].shape(), expected),
            });
        }

        let t_total = frames.len();
        let inv_t = S::from_f64(1.0 / t_total as f64);
        let last_conv = self.last_conv_index();
        let last_linear = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear(_)));

        let mut states: Vec<Option<LifState<S>>> = vec![None; self.layers.len()];
        let mut rate_acc: Option<Tensor<S>> = None;
        let mut pen_acc: Option<Vec<f64>> = None;
        let mut pen_width = 0usize;
        let mut conv_acc: Option<Vec<f64>> = None;

        for (ti, frame) in frames.iter().enumerate() {
            let mut h = frame.clone();
            let mut param_cursor = 0usize;
            for (li, layer) in self.layers.iter().enumerate() {
                match layer {
                    Layer::Conv(c) => {
                        let weight = &eff[param_cursor];
                        let bias = &eff[param_cursor + 1];
                        let gain = &eff[param_cursor + 2];
                        let gbias = &eff[param_cursor + 3];
                        param_cursor += 4;
                        h = conv2d(&h, weight, bias, c.stride, c.pad)?;
                        h = channel_affine(&h, gain, gbias)?;
                        if let Some(mask) = &c.mask {
                            h = scale_channels(&h, mask)?;
                        }
                    }
                    Layer::Linear(_) => {
                        let weight = &eff[param_cursor];
                        let bias = &eff[param_cursor + 1];
                        param_cursor += 2;
                        if capture.penultimate && Some(li) == last_linear {
                            pen_width = h.shape()[1];
                            let acc = pen_acc.get_or_insert_with(|| vec![0.0; h.numel()]);
                            for (a, v) in acc.iter_mut().zip(h.data()) {
                                *a += v.into_f64() / t_total as f64;
                            }
                        }
                        h = linear(&h, weight, bias)?;
                    }
                    Layer::Lif(cfg) => {
                        let state = states[li]
                            .take()
                            .unwrap_or_else(|| LifState::zeros(h.shape()));
                        let (spikes, next) = lif_step(&state, &h, cfg, opts.smooth)?;
                        states[li] = Some(next);
                        h = spikes;
                        if capture.conv_rates && last_conv.map(|c| c + 1) == Some(li) {
                            let k = h.shape()[1];
                            let spatial = h.shape()[2] * h.shape()[3];
                            let acc = conv_acc.get_or_insert_with(|| vec![0.0; b * k]);
                            for bi in 0..b {
                                for ki in 0..k {
                                    let base = (bi * k + ki) * spatial;
                                    let mut s = 0.0;
                                    for v in &h.data()[base..base + spatial] {
                                        s += v.into_f64();
                                    }
                                    acc[bi * k + ki] += s / (spatial * t_total) as f64;
                                }
                            }
                        }
                    }
                    Layer::MaxPool2 => {
                        h = maxpool2(&h)?;
                    }
                    Layer::Dropout(rate) => {
                        if opts.train && *rate > 0.0 {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                                opts.dropout_seed,
                                li as u64,
                                ti as u64,
                            ));
                            h = dropout(&h, *rate, &mut rng)?;
                        }
                    }
                    Layer::Flatten => {
                        let numel: usize = h.shape()[1..].iter().product();
                        h = reshape(&h, &[b, numel])?;
                    }
                    Layer::Voting(_) => {
                        // applied once to the time-averaged rates below
                    }
                }
            }
            rate_acc = Some(match rate_acc {
                Some(acc) => add(&acc, &h)?,
                None => h,
            });
        }

        let mut rates = scale(&rate_acc.expect("at least one frame"), inv_t)?;
        rates = mean_groups(&rates, self.votes)?;
        Ok(ForwardOutput {
            rates,
            bound: None,
            penultimate: pen_acc,
            penultimate_width: pen_width,
            conv_rates: conv_acc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lif_fires_and_resets() {
        let cfg = LifConfig::default();
        let state = LifState::<f64>::zeros(&[1]);
        let input = Tensor::from_vec(&[1], vec![1.5]).unwrap();
        let (s, next) = lif_step(&state, &input, &cfg, false).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(next.v.data(), &[0.0]);
    }

    #[test]
    fn lif_decays_below_threshold() {
        let cfg = LifConfig::default(); // tau 2 -> decay 0.5
        let state = LifState::<f64> {
            v: Tensor::from_vec(&[1], vec![0.4]).unwrap(),
        };
        let input = Tensor::from_vec(&[1], vec![0.3]).unwrap();
        let (s, next) = lif_step(&state, &input, &cfg, false).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!((next.v.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn infinite_tau_is_integrate_and_fire() {
        let cfg = LifConfig {
            tau_mem: f64::INFINITY,
            ..Default::default()
        };
        let state = LifState::<f64> {
            v: Tensor::from_vec(&[1], vec![0.3]).unwrap(),
        };
        let input = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let (_, next) = lif_step(&state, &input, &cfg, false).unwrap();
        assert!((next.v.data()[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn build_rejects_zero_votes() {
        let cfg = NetConfig {
            votes: 0,
            ..Default::default()
        };
        assert!(SpikingNet::<f32>::build(&cfg, (2, 32, 32), 4, 0).is_err());
    }

    #[test]
    fn zero_input_yields_zero_rates() {
        let net = SpikingNet::<f32>::build(&NetConfig::default(), (2, 16, 16), 4, 7).unwrap();
        let frames: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::zeros(&[2, 2, 16, 16])).collect();
        let out = net
            .forward_frames(&frames, ForwardOpts::default(), Capture::default())
            .unwrap();
        assert_eq!(out.rates.shape(), &[2, 4]);
        assert!(out.rates.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rates_bounded_in_unit_interval() {
        let net = SpikingNet::<f32>::build(&NetConfig::default(), (2, 16, 16), 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Tensor<f32>> = (0..6)
            .map(|_| Tensor::rand_uniform(&[3, 2, 16, 16], 0.0, 1.0, &mut rng))
            .collect();
        let out = net
            .forward_frames(&frames, ForwardOpts::default(), Capture::default())
            .unwrap();
        assert!(out
            .rates
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(&(*v as f64))));
    }

    #[test]
    fn params_roundtrip() {
        let mut net = SpikingNet::<f32>::build(&NetConfig::default(), (2, 16, 16), 4, 1).unwrap();
        let p = net.params();
        assert_eq!(p.len(), 6); // conv w/b/gain/gbias + linear w/b
        net.set_params(p.clone()).unwrap();
        assert_eq!(net.params()[0].data(), p[0].data());
    }
}
