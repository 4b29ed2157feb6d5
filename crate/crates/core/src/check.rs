//! Gradient self-checks and oracle equivalences.
//!
//! The finite-difference harness perturbs every input element with central
//! differences (64-bit, h = 1e-5) and compares against the tape's analytic
//! gradients. The spike nonlinearity runs in smooth mode here, whose exact
//! derivative is the surrogate used during training; that path is what the
//! checks validate.

use crate::error::Result;
use crate::events::{bin_events, Event, EventStream};
use crate::snn::{Capture, ForwardOpts, LifConfig, NetConfig, SpikingNet, TrainConfig};
use crate::tensor::{
    add, add_scalar, backward, channel_affine, clamp, conv2d, conv_transpose2d, dropout, linear,
    maxpool2, mean_groups, mse_loss, mul, reshape, scale, scale_channels, spike, sub, sum, tanh,
    Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const NET_TOLERANCE: f64 = 1e-4;

type LossFn<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;

/// Maximum relative error between analytic and central-difference gradients
/// of `build` over every element of every parameter.
pub fn finite_diff_max_rel(params: &[Tensor<f64>], build: &LossFn<'_>, h: f64) -> Result<f64> {
    // analytic pass
    let tape = Tape::new();
    let watched: Vec<Tensor<f64>> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = build(&watched)?;
    let grads = backward(&loss)?;
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|w| grads.wrt(w))
        .collect::<Result<_>>()?;

    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut moved: Vec<Tensor<f64>> = params.to_vec();
                let mut data = params[pi].data().to_vec();
                data[j] += delta;
                moved[pi] = Tensor::from_vec(params[pi].shape(), data)?;
                build(&moved)?.item()
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// Random tensor where every 2x2 window has a unique maximum with margin
/// well above the finite-difference step.
fn pool_safe_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let t = rand_tensor(&[n, c, h, w], 0.0, 1.0, seed);
    let mut data = t.data().to_vec();
    for img in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let i00 = img * h * w + 2 * oy * w + 2 * ox;
                let idxs = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let best = *idxs
                    .iter()
                    .max_by(|a, b| data[**a].partial_cmp(&data[**b]).unwrap())
                    .unwrap();
                data[best] += 0.5;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], data).unwrap()
}

pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn grad_check(
    name: &'static str,
    params: &[Tensor<f64>],
    build: &LossFn<'_>,
    tolerance: f64,
) -> Result<CheckOutcome> {
    let max_rel = finite_diff_max_rel(params, build, FD_STEP)?;
    Ok(CheckOutcome {
        name,
        max_rel,
        tolerance,
        pass: max_rel < tolerance,
    })
}

fn mse_to_fixed(loss_inputs: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let target = rand_tensor(loss_inputs.shape(), 0.0, 1.0, seed);
    mse_loss(loss_inputs, &target)
}

/// Gradient check of the full unrolled spiking forward pass (smooth spikes)
/// with respect to every parameter of a two-layer net.
pub fn spiking_net_grad_check() -> Result<f64> {
    let lif = LifConfig::default();
    let cfg = NetConfig {
        conv_channels: vec![2],
        kernel: 3,
        conv_stride: 1,
        hidden: None,
        dropout: 0.0,
        votes: 1,
        lif,
    };
    let net = SpikingNet::<f64>::build(&cfg, (2, 6, 6), 4, 31)?;
    let frames: Vec<Tensor<f64>> = (0..3)
        .map(|t| rand_tensor(&[2, 2, 6, 6], 0.0, 1.5, 100 + t as u64))
        .collect();
    let target = rand_tensor(&[2, 4], 0.0, 1.0, 7);

    // analytic
    let tape = Tape::new();
    let out = net.forward_frames(
        &frames,
        ForwardOpts {
            tape: Some(&tape),
            train: false,
            smooth: true,
            dropout_seed: 0,
        },
        Capture::default(),
    )?;
    let loss = mse_loss(&out.rates, &target)?;
    let grads = backward(&loss)?;
    let bound = out.bound.expect("tracked forward");
    let analytic: Vec<Vec<f64>> = bound.iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;

    // numeric
    let base = net.params();
    let mut max_rel: f64 = 0.0;
    for pi in 0..base.len() {
        for j in 0..base[pi].numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = base.clone();
                let mut data = base[pi].data().to_vec();
                data[j] += delta;
                p[pi] = Tensor::from_vec(base[pi].shape(), data)?;
                let mut moved = net.clone();
                moved.set_params(p)?;
                let out = moved.forward_frames(
                    &frames,
                    ForwardOpts {
                        tape: None,
                        train: false,
                        smooth: true,
                        dropout_seed: 0,
                    },
                    Capture::default(),
                )?;
                mse_loss(&out.rates, &target)?.item()
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Backward of a sum of losses equals the sum of the individual backwards.
fn linearity_check() -> Result<f64> {
    let x0 = rand_tensor(&[2, 6], -1.0, 1.0, 51);
    let w0 = rand_tensor(&[3, 6], -0.5, 0.5, 52);
    let b0 = rand_tensor(&[3], -0.1, 0.1, 53);
    let t1 = rand_tensor(&[2, 3], 0.0, 1.0, 54);
    let t2 = rand_tensor(&[2, 3], 0.0, 1.0, 55);

    let combined = {
        let tape = Tape::new();
        let (x, w, b) = (tape.watch(&x0), tape.watch(&w0), tape.watch(&b0));
        let y = linear(&x, &w, &b)?;
        let loss = add(&mse_loss(&y, &t1)?, &mse_loss(&y, &t2)?)?;
        let grads = backward(&loss)?;
        grads.wrt(&w)?
    };
    let separate = {
        let ga = {
            let tape = Tape::new();
            let (x, w, b) = (tape.watch(&x0), tape.watch(&w0), tape.watch(&b0));
            let y = linear(&x, &w, &b)?;
            let grads = backward(&mse_loss(&y, &t1)?)?;
            grads.wrt(&w)?
        };
        let gb = {
            let tape = Tape::new();
            let (x, w, b) = (tape.watch(&x0), tape.watch(&w0), tape.watch(&b0));
            let y = linear(&x, &w, &b)?;
            let grads = backward(&mse_loss(&y, &t2)?)?;
            grads.wrt(&w)?
        };
        ga.iter().zip(&gb).map(|(a, b)| a + b).collect::<Vec<_>>()
    };
    let mut max_rel: f64 = 0.0;
    for (c, s) in combined.iter().zip(&separate) {
        max_rel = max_rel.max((c - s).abs() / c.abs().max(s.abs()).max(1e-3));
    }
    Ok(max_rel)
}

/// Event-count conservation through binning on random streams.
fn bin_conservation_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(0..200);
        let dur = rng.gen_range(1..5000u64);
        let mut ts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..dur)).collect();
        ts.sort_unstable();
        let events: Vec<Event> = ts
            .iter()
            .map(|&t| Event {
                t_us: t,
                x: rng.gen_range(0..8),
                y: rng.gen_range(0..8),
                ch: rng.gen_range(0..2),
            })
            .collect();
        let stream = EventStream {
            events,
            height: 8,
            width: 8,
            duration_us: dur,
        };
        let frames = bin_events(&stream, rng.gen_range(1..20))?;
        worst = worst.max((frames.total() - n as f64).abs());
    }
    Ok(worst)
}

/// Training-step determinism: two identical fits agree bit-for-bit.
fn fit_determinism_check() -> Result<f64> {
    let cfg = crate::events::SynthConfig {
        height: 16,
        width: 16,
        frames: 4,
        shape_side: 3,
        step: 2,
        noise: 0.0,
        n_train: 8,
        n_test: 4,
    };
    let (train, _) = crate::events::synth_dataset(&cfg, 13)?;
    let net_cfg = NetConfig {
        conv_channels: vec![4],
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 1,
        batch: 4,
        lr: 0.001,
        seed: 5,
    };
    let mut a = SpikingNet::<f32>::build(&net_cfg, (2, 16, 16), 4, 8)?;
    let mut b = SpikingNet::<f32>::build(&net_cfg, (2, 16, 16), 4, 8)?;
    crate::snn::fit(&mut a, &train, None, &tc)?;
    crate::snn::fit(&mut b, &train, None, &tc)?;
    let mut worst = 0.0f64;
    for (pa, pb) in a.params().iter().zip(b.params().iter()) {
        for (x, y) in pa.data().iter().zip(pb.data()) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    Ok(worst)
}

/// Runs every self-check. `corrupt` artificially inflates the named check's
/// error so the failure path can be exercised end to end.
pub fn run_all(corrupt: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // elementwise and shape ops through an mse head
    let x = rand_tensor(&[2, 5], -1.0, 1.0, 1);
    let y = rand_tensor(&[2, 5], -1.0, 1.0, 2);
    out.push(grad_check("add", &[x.clone(), y.clone()], &|p| {
        mse_to_fixed(&add(&p[0], &p[1])?, 3)
    }, OP_TOLERANCE)?);
    out.push(grad_check("sub", &[x.clone(), y.clone()], &|p| {
        mse_to_fixed(&sub(&p[0], &p[1])?, 4)
    }, OP_TOLERANCE)?);
    out.push(grad_check("mul", &[x.clone(), y.clone()], &|p| {
        mse_to_fixed(&mul(&p[0], &p[1])?, 5)
    }, OP_TOLERANCE)?);
    out.push(grad_check("scale", &[x.clone()], &|p| {
        mse_to_fixed(&scale(&p[0], -1.7)?, 6)
    }, OP_TOLERANCE)?);
    out.push(grad_check("add_scalar", &[x.clone()], &|p| {
        mse_to_fixed(&add_scalar(&p[0], 0.3)?, 7)
    }, OP_TOLERANCE)?);
    out.push(grad_check("tanh", &[x.clone()], &|p| {
        mse_to_fixed(&tanh(&p[0])?, 8)
    }, OP_TOLERANCE)?);
    out.push(grad_check("sum", &[x.clone()], &|p| sum(&mul(&p[0], &p[0])?), OP_TOLERANCE)?);

    // clamp with inputs held away from the kinks
    let spread = {
        let raw = rand_tensor(&[3, 4], -1.0, 1.0, 9);
        let data = raw
            .data()
            .iter()
            .map(|v| {
                let v = *v;
                if (v.abs() - 0.5).abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect();
        Tensor::from_vec(&[3, 4], data).unwrap()
    };
    out.push(grad_check("clamp", &[spread], &|p| {
        mse_to_fixed(&clamp(&p[0], -0.5, 0.5)?, 10)
    }, OP_TOLERANCE)?);

    // spike in smooth mode
    let v = rand_tensor(&[2, 6], -0.5, 2.0, 11);
    out.push(grad_check("spike", &[v], &|p| {
        mse_to_fixed(&spike(&p[0], 1.0, 2.0, true)?, 12)
    }, OP_TOLERANCE)?);

    // conv2d on the 1x2x5x5 / 3-kernel fixture, plus a strided variant
    let cx = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, 13);
    let cw = rand_tensor(&[3, 2, 3, 3], -0.5, 0.5, 14);
    let cb = rand_tensor(&[3], -0.2, 0.2, 15);
    out.push(grad_check("conv2d", &[cx.clone(), cw.clone(), cb.clone()], &|p| {
        mse_to_fixed(&conv2d(&p[0], &p[1], &p[2], 1, 1)?, 16)
    }, OP_TOLERANCE)?);
    let sx = rand_tensor(&[2, 2, 6, 6], -1.0, 1.0, 17);
    out.push(grad_check("conv2d_stride2", &[sx, cw.clone(), cb.clone()], &|p| {
        mse_to_fixed(&conv2d(&p[0], &p[1], &p[2], 2, 1)?, 18)
    }, OP_TOLERANCE)?);

    // transposed conv
    let tx = rand_tensor(&[1, 3, 4, 4], -1.0, 1.0, 19);
    let tw = rand_tensor(&[3, 2, 4, 4], -0.5, 0.5, 20);
    let tb = rand_tensor(&[2], -0.2, 0.2, 21);
    out.push(grad_check("conv_transpose2d", &[tx, tw, tb], &|p| {
        mse_to_fixed(&conv_transpose2d(&p[0], &p[1], &p[2], 2, 1)?, 22)
    }, OP_TOLERANCE)?);

    // linear
    let lx = rand_tensor(&[3, 7], -1.0, 1.0, 23);
    let lw = rand_tensor(&[4, 7], -0.5, 0.5, 24);
    let lb = rand_tensor(&[4], -0.2, 0.2, 25);
    out.push(grad_check("linear", &[lx, lw, lb], &|p| {
        mse_to_fixed(&linear(&p[0], &p[1], &p[2])?, 26)
    }, OP_TOLERANCE)?);

    // maxpool on margin-safe windows
    let px = pool_safe_tensor(1, 2, 6, 6, 27);
    out.push(grad_check("maxpool2", &[px], &|p| {
        mse_to_fixed(&maxpool2(&p[0])?, 28)
    }, OP_TOLERANCE)?);

    // channel affine + fixed channel scaling
    let ax = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, 29);
    let ag = rand_tensor(&[3], 0.5, 1.5, 30);
    let ab = rand_tensor(&[3], -0.3, 0.3, 31);
    out.push(grad_check("channel_affine", &[ax.clone(), ag, ab], &|p| {
        mse_to_fixed(&channel_affine(&p[0], &p[1], &p[2])?, 32)
    }, OP_TOLERANCE)?);
    out.push(grad_check("scale_channels", &[ax], &|p| {
        mse_to_fixed(&scale_channels(&p[0], &[1.0, 0.0, 0.5])?, 33)
    }, OP_TOLERANCE)?);

    // dropout with a deterministic mask per evaluation
    let dx = rand_tensor(&[2, 8], -1.0, 1.0, 34);
    out.push(grad_check("dropout", &[dx], &|p| {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        mse_to_fixed(&dropout(&p[0], 0.4, &mut rng)?, 36)
    }, OP_TOLERANCE)?);

    // voting / reshape
    let mx = rand_tensor(&[2, 8], -1.0, 1.0, 37);
    out.push(grad_check("mean_groups", &[mx.clone()], &|p| {
        mse_to_fixed(&mean_groups(&p[0], 2)?, 38)
    }, OP_TOLERANCE)?);
    out.push(grad_check("reshape", &[mx], &|p| {
        mse_to_fixed(&reshape(&p[0], &[4, 4])?, 39)
    }, OP_TOLERANCE)?);

    // mse against a tracked second argument
    let ma = rand_tensor(&[2, 4], 0.0, 1.0, 40);
    let mb = rand_tensor(&[2, 4], 0.0, 1.0, 41);
    out.push(grad_check("mse_loss", &[ma, mb], &|p| mse_loss(&p[0], &p[1]), OP_TOLERANCE)?);

    // composite graph: conv -> affine -> spike -> pool -> flatten -> linear -> mse
    let gx = rand_tensor(&[1, 2, 6, 6], 0.0, 1.0, 42);
    let gw = rand_tensor(&[2, 2, 3, 3], -0.5, 0.5, 43);
    let gb = rand_tensor(&[2], -0.1, 0.1, 44);
    let gg = rand_tensor(&[2], 0.8, 1.2, 45);
    let ga = rand_tensor(&[2], -0.1, 0.1, 46);
    let gl = rand_tensor(&[4, 18], -0.4, 0.4, 47);
    let glb = rand_tensor(&[4], -0.1, 0.1, 48);
    out.push(grad_check(
        "composite_conv_linear_mse",
        &[gx, gw, gb, gg, ga, gl, glb],
        &|p| {
            let c = conv2d(&p[0], &p[1], &p[2], 1, 1)?;
            let a = channel_affine(&c, &p[3], &p[4])?;
            let s = spike(&a, 1.0, 2.0, true)?;
            let pooled = maxpool2(&s)?;
            let flat = reshape(&pooled, &[1, 18])?;
            let y = linear(&flat, &p[5], &p[6])?;
            mse_to_fixed(&y, 49)
        },
        OP_TOLERANCE,
    )?);

    // full unrolled spiking net
    let net_rel = spiking_net_grad_check()?;
    out.push(CheckOutcome {
        name: "spiking_net_unrolled",
        max_rel: net_rel,
        tolerance: NET_TOLERANCE,
        pass: net_rel < NET_TOLERANCE,
    });

    let lin_rel = linearity_check()?;
    out.push(CheckOutcome {
        name: "backward_linearity",
        max_rel: lin_rel,
        tolerance: 1e-9,
        pass: lin_rel < 1e-9,
    });

    let bin_err = bin_conservation_check()?;
    out.push(CheckOutcome {
        name: "bin_event_conservation",
        max_rel: bin_err,
        tolerance: 1e-9,
        pass: bin_err < 1e-9,
    });

    let det_err = fit_determinism_check()?;
    out.push(CheckOutcome {
        name: "fit_determinism",
        max_rel: det_err,
        tolerance: 0.0 + f64::EPSILON,
        pass: det_err == 0.0,
    });

    if let Some(name) = corrupt {
        for c in &mut out {
            if c.name == name {
                c.max_rel += 1.0;
                c.pass = false;
            }
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all(None).unwrap();
        for r in &results {
            assert!(
                r.pass,
                "check {} failed: max rel err {} >= {}",
                r.name, r.max_rel, r.tolerance
            );
        }
    }

    #[test]
    fn corruption_hook_fails_named_check() {
        let results = run_all(Some("conv2d")).unwrap();
        let conv = results.iter().find(|r| r.name == "conv2d").unwrap();
        assert!(!conv.pass);
        assert!(results.iter().filter(|r| !r.pass).count() == 1);
    }
}
