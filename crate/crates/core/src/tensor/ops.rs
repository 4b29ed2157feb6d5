//! Differentiable tensor operations.
//!
//! Every op works on untracked tensors as a plain computation; if any input
//! is tracked the result is recorded on that input's tape. Mixing tensors
//! from different tapes is an error.

use super::kernels::{self, ConvGeom};
use super::tape::{BinKind, Record, Src, UnaryKind};
use super::{dims2, dims4, NodeRef, Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::sync::Arc;

fn shared_tape<S: Scalar>(ts: &[&Tensor<S>]) -> Result<Option<Tape<S>>> {
    let mut found: Option<Tape<S>> = None;
    for t in ts {
        if let Some(node) = &t.node {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tape) => {
                    if !tape.same_tape(&node.tape) {
                        return Err(Error::Tape(
                            "operands tracked on different tapes".to_string(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

fn finish<S: Scalar>(
    shape: Vec<usize>,
    data: Vec<S>,
    tape: Option<Tape<S>>,
    rec: impl FnOnce() -> Record<S>,
) -> Result<Tensor<S>> {
    let node = match tape {
        Some(tape) => {
            let id = tape.record(rec())?;
            Some(NodeRef { tape, id })
        }
        None => None,
    };
    Ok(Tensor {
        shape,
        data: Arc::new(data),
        node,
    })
}

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, opname: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            axis: opname,
            detail: format!("shape {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(a, b, "add")?;
    let tape = shared_tape(&[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    finish(a.shape().to_vec(), data, tape, || Record::Binary {
        a: Src::of(a),
        b: Src::of(b),
        kind: BinKind::Add,
    })
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(a, b, "sub")?;
    let tape = shared_tape(&[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    finish(a.shape().to_vec(), data, tape, || Record::Binary {
        a: Src::of(a),
        b: Src::of(b),
        kind: BinKind::Sub,
    })
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(a, b, "mul")?;
    let tape = shared_tape(&[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    finish(a.shape().to_vec(), data, tape, || Record::Binary {
        a: Src::of(a),
        b: Src::of(b),
        kind: BinKind::Mul,
    })
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
    let tape = shared_tape(&[a])?;
    let data = a.data().iter().map(|x| *x * c).collect();
    finish(a.shape().to_vec(), data, tape, || Record::Unary {
        x: Src::of(a),
        kind: UnaryKind::Scale(c),
    })
}

pub fn add_scalar<S: Scalar>(a: &Tensor<S>, c: S) -> Result<Tensor<S>> {
    let tape = shared_tape(&[a])?;
    let data = a.data().iter().map(|x| *x + c).collect();
    finish(a.shape().to_vec(), data, tape, || Record::Unary {
        x: Src::of(a),
        kind: UnaryKind::AddScalar,
    })
}

pub fn tanh<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let tape = shared_tape(&[a])?;
    let data: Vec<S> = a.data().iter().map(|x| x.tanh()).collect();
    let saved = Arc::new(data.clone());
    finish(a.shape().to_vec(), data, tape, || Record::Unary {
        x: Src::of(a),
        kind: UnaryKind::Tanh { y: saved },
    })
}

/// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
pub fn clamp<S: Scalar>(a: &Tensor<S>, lo: S, hi: S) -> Result<Tensor<S>> {
    let tape = shared_tape(&[a])?;
    let data = a
        .data()
        .iter()
        .map(|x| {
            if *x < lo {
                lo
            } else if *x > hi {
                hi
            } else {
                *x
            }
        })
        .collect();
    finish(a.shape().to_vec(), data, tape, || Record::Unary {
        x: Src::of(a),
        kind: UnaryKind::Clamp { lo, hi },
    })
}

/// Spike nonlinearity on membrane potential `v` with threshold `theta`.
///
/// `smooth = false`: Heaviside step `[v >= theta]` (training/inference).
/// `smooth = true`: the arctan primitive `1/2 + atan(pi*alpha*(v-theta)/2)/pi`,
/// whose exact derivative equals the surrogate used in the backward pass;
/// gradient checks run in this mode.
pub fn spike<S: Scalar>(v: &Tensor<S>, theta: S, alpha: S, smooth: bool) -> Result<Tensor<S>> {
    let tape = shared_tape(&[v])?;
    let pi = S::from_f64(std::f64::consts::PI);
    let two = S::from_f64(2.0);
    let data: Vec<S> = if smooth {
        v.data()
            .iter()
            .map(|x| {
                let u = *x - theta;
                S::from_f64(0.5) + (pi * alpha * u / two).atan() / pi
            })
            .collect()
    } else {
        v.data()
            .iter()
            .map(|x| if *x >= theta { S::one() } else { S::zero() })
            .collect()
    };
    finish(v.shape().to_vec(), data, tape, || Record::Unary {
        x: Src::of(v),
        kind: UnaryKind::Spike { theta, alpha },
    })
}

/// 2-D cross-correlation of `x: (N,C,H,W)` with `weight: (K,C,kh,kw)` plus bias.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "conv2d input")?;
    let (k, cw, kh, kw) = dims4(weight, "conv2d weight")?;
    if c != cw {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!("input has {} channels, weight expects {}", c, cw),
        });
    }
    if bias.shape() != [k] {
        return Err(Error::Dimension {
            axis: "bias",
            detail: format!("bias shape {:?}, want [{}]", bias.shape(), k),
        });
    }
    if stride == 0 {
        return Err(Error::Dimension {
            axis: "stride",
            detail: "stride must be >= 1".to_string(),
        });
    }
    let ho = ConvGeom::out_dim(h, kh, stride, pad).ok_or_else(|| Error::Dimension {
        axis: "height",
        detail: format!("kernel {} too large for input {} with pad {}", kh, h, pad),
    })?;
    let wo = ConvGeom::out_dim(w, kw, stride, pad).ok_or_else(|| Error::Dimension {
        axis: "width",
        detail: format!("kernel {} too large for input {} with pad {}", kw, w, pad),
    })?;
    let geom = ConvGeom {
        n,
        cin: c,
        h,
        w,
        cout: k,
        kh,
        kw,
        stride,
        pad,
        ho,
        wo,
    };
    let tape = shared_tape(&[x, weight, bias])?;
    let data = kernels::conv2d_forward(x.data(), weight.data(), Some(bias.data()), &geom);
    finish(vec![n, k, ho, wo], data, tape, || Record::Conv2d {
        x: Src::of(x),
        w: Src::of(weight),
        b: Src::of(bias),
        geom,
    })
}

/// Transposed 2-D convolution of `x: (N,Cin,H,W)` with `weight: (Cin,Cout,kh,kw)`.
/// Output spatial size is `(H-1)*stride - 2*pad + k`.
pub fn conv_transpose2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, cin, h, w) = dims4(x, "conv_transpose2d input")?;
    let (cw, cout, kh, kw) = dims4(weight, "conv_transpose2d weight")?;
    if cin != cw {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!("input has {} channels, weight expects {}", cin, cw),
        });
    }
    if bias.shape() != [cout] {
        return Err(Error::Dimension {
            axis: "bias",
            detail: format!("bias shape {:?}, want [{}]", bias.shape(), cout),
        });
    }
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    if ho < 2 * pad || wo < 2 * pad {
        return Err(Error::Dimension {
            axis: "pad",
            detail: "padding larger than produced output".to_string(),
        });
    }
    let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
    // Geometry of the forward conv whose *input* is this op's output.
    let geom = ConvGeom {
        n,
        cin: cout,
        h: ho,
        w: wo,
        cout: cin,
        kh,
        kw,
        stride,
        pad,
        ho: h,
        wo: w,
    };
    let tape = shared_tape(&[x, weight, bias])?;
    let mut data = kernels::conv2d_bwd_input(x.data(), weight.data(), &geom);
    for ni in 0..n {
        for co in 0..cout {
            let base = (ni * cout + co) * ho * wo;
            let bv = bias.data()[co];
            for v in &mut data[base..base + ho * wo] {
                *v = *v + bv;
            }
        }
    }
    finish(vec![n, cout, ho, wo], data, tape, || Record::ConvT2d {
        x: Src::of(x),
        w: Src::of(weight),
        b: Src::of(bias),
        geom,
    })
}

/// Affine map `y = x w^T + b` of `x: (N,F)` with `weight: (O,F)`, `bias: (O)`.
pub fn linear<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, f) = dims2(x, "linear input")?;
    let (o, fw) = dims2(weight, "linear weight")?;
    if f != fw {
        return Err(Error::Dimension {
            axis: "features",
            detail: format!("input has {} features, weight expects {}", f, fw),
        });
    }
    if bias.shape() != [o] {
        return Err(Error::Dimension {
            axis: "bias",
            detail: format!("bias shape {:?}, want [{}]", bias.shape(), o),
        });
    }
    let tape = shared_tape(&[x, weight, bias])?;
    let data = kernels::linear_forward(x.data(), weight.data(), bias.data(), n, f, o);
    finish(vec![n, o], data, tape, || Record::Linear {
        x: Src::of(x),
        w: Src::of(weight),
        b: Src::of(bias),
    })
}

/// Per-channel affine `y[n,c,:,:] = x[n,c,:,:] * gain[c] + bias[c]`.
pub fn channel_affine<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "channel_affine input")?;
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!(
                "gain {:?} / bias {:?} do not match {} channels",
                gain.shape(),
                bias.shape(),
                c
            ),
        });
    }
    let tape = shared_tape(&[x, gain, bias])?;
    let hw = h * w;
    let mut data = vec![S::zero(); x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (gv, bv) = (gain.data()[ch], bias.data()[ch]);
            for j in 0..hw {
                data[base + j] = x.data()[base + j] * gv + bv;
            }
        }
    }
    finish(x.shape().to_vec(), data, tape, || Record::ChannelAffine {
        x: Src::of(x),
        gain: Src::of(gain),
        bias: Src::of(bias),
    })
}

/// Multiplies each channel by a fixed (non-learnable) factor; used for
/// persistent pruning masks.
pub fn scale_channels<S: Scalar>(x: &Tensor<S>, factors: &[S]) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "scale_channels input")?;
    if factors.len() != c {
        return Err(Error::Dimension {
            axis: "channels",
            detail: format!("{} factors for {} channels", factors.len(), c),
        });
    }
    let tape = shared_tape(&[x])?;
    let hw = h * w;
    let mut data = vec![S::zero(); x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let f = factors[ch];
            for j in 0..hw {
                data[base + j] = x.data()[base + j] * f;
            }
        }
    }
    let saved = Arc::new(factors.to_vec());
    finish(x.shape().to_vec(), data, tape, || Record::ScaleChannels {
        x: Src::of(x),
        factors: saved,
    })
}

/// 2x2 non-overlapping max pooling; ties go to the first cell in row-major
/// order and the backward pass routes the gradient to that cell.
pub fn maxpool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "maxpool2 input")?;
    if h % 2 != 0 {
        return Err(Error::Dimension {
            axis: "height",
            detail: format!("maxpool2 needs even height, got {}", h),
        });
    }
    if w % 2 != 0 {
        return Err(Error::Dimension {
            axis: "width",
            detail: format!("maxpool2 needs even width, got {}", w),
        });
    }
    let tape = shared_tape(&[x])?;
    let (data, argmax) = kernels::maxpool2_forward(x.data(), n, c, h, w);
    finish(vec![n, c, h / 2, w / 2], data, tape, || Record::MaxPool2 {
        x: Src::of(x),
        argmax,
    })
}

/// View with a new shape (same element count).
pub fn reshape<S: Scalar>(x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Dimension {
            axis: "numel",
            detail: format!("cannot reshape {:?} into {:?}", x.shape(), shape),
        });
    }
    let tape = shared_tape(&[x])?;
    let data = x.data().to_vec();
    finish(shape.to_vec(), data, tape, || Record::Reshape { x: Src::of(x) })
}

/// Voting: averages each contiguous group of `group` columns of `x: (N, C*group)`.
pub fn mean_groups<S: Scalar>(x: &Tensor<S>, group: usize) -> Result<Tensor<S>> {
    let (n, cg) = dims2(x, "mean_groups input")?;
    if group == 0 || cg % group != 0 {
        return Err(Error::Dimension {
            axis: "votes",
            detail: format!("width {} not divisible by group {}", cg, group),
        });
    }
    let c = cg / group;
    let tape = shared_tape(&[x])?;
    let inv = S::one() / S::from_f64(group as f64);
    let mut data = vec![S::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let mut acc = S::zero();
            for v in 0..group {
                acc = acc + x.data()[i * cg + j * group + v];
            }
            data[i * c + j] = acc * inv;
        }
    }
    finish(vec![n, c], data, tape, || Record::MeanGroups {
        x: Src::of(x),
        group,
    })
}

/// Inverted dropout: keeps an element with probability `1-rate` and scales it
/// by `1/(1-rate)`. The mask is drawn from `rng` at call time.
pub fn dropout<S: Scalar, R: Rng>(x: &Tensor<S>, rate: f64, rng: &mut R) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
    }
    let tape = shared_tape(&[x])?;
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.numel())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
    let saved = Arc::new(mask);
    finish(x.shape().to_vec(), data, tape, || Record::Dropout {
        x: Src::of(x),
        mask: saved,
    })
}

/// Mean of squared elementwise differences, as a scalar tensor.
/// A non-finite result is reported as an error (NaN surfaces at the loss).
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(pred, target, "mse_loss")?;
    let tape = shared_tape(&[pred, target])?;
    let count = S::from_f64(pred.numel() as f64);
    let mut acc = S::zero();
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = *p - *t;
        acc = acc + d * d;
    }
    let value = acc / count;
    if !value.is_finite() {
        return Err(Error::NonFinite("mse_loss evaluated to a non-finite value".to_string()));
    }
    finish(vec![], vec![value], tape, || Record::MseLoss {
        pred: Src::of(pred),
        target: Src::of(target),
    })
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let tape = shared_tape(&[x])?;
    let mut acc = S::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    finish(vec![], vec![acc], tape, || Record::Sum { x: Src::of(x) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn identity_kernel_conv() {
        // 1x1 kernel with weight 1, bias 0 reproduces the input.
        let x = Tensor::<f64>::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn impulse_conv_spreads_ones() {
        // unit impulse, 3x3 all-ones kernel, padding 1 -> 3x3 block of ones.
        let mut xv = vec![0.0f64; 25];
        xv[12] = 1.0; // center of 5x5
        let x = Tensor::from_vec(&[1, 1, 5, 5], xv).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let want = if (1..=3).contains(&yy) && (1..=3).contains(&xx) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(y.data()[yy * 5 + xx], want, "at ({},{})", yy, xx);
            }
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::<f64>::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b0 = Tensor::zeros(&[3]);
        let y = linear(&x, &eye, &b0).unwrap();
        assert_eq!(y.data(), x.data());

        let zero = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let y = linear(&zero, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn maxpool_constant_and_block() {
        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 2.5);
        let y = maxpool2(&c).unwrap();
        assert!(y.data().iter().all(|v| *v == 2.5));

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(
            maxpool2(&x),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }

    #[test]
    fn mse_direct_values() {
        let p = Tensor::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[2]);
        let l = mse_loss(&p, &t).unwrap();
        assert_eq!(l.item().unwrap(), 0.5);
        let same = mse_loss(&t, &t).unwrap();
        assert_eq!(same.item().unwrap(), 0.0);
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let w = tape.watch(&Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = sum(&w).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_backward_scalar() {
        // loss = mse(w, 0) with scalar w = 3 has gradient 2w = 6.
        let tape = Tape::new();
        let w = tape.watch(&Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap());
        let loss = mse_loss(&w, &Tensor::zeros(&[1])).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap(), vec![6.0]);
    }

    #[test]
    fn spike_surrogate_at_threshold_is_one() {
        // alpha = 2 at u = 0: alpha/2 = 1.0.
        let tape = Tape::new();
        let v = tape.watch(&Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap());
        let s = spike(&v, 1.0, 2.0, false).unwrap();
        let loss = sum(&s).unwrap();
        let grads = backward(&loss).unwrap();
        assert!((grads.wrt(&v).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let tape = Tape::new();
        let w = tape.watch(&Tensor::<f64>::zeros(&[2]));
        assert!(matches!(backward(&w), Err(Error::Tape(_))));
        let free = Tensor::<f64>::scalar(1.0);
        assert!(matches!(backward(&free), Err(Error::Tape(_))));
    }

    #[test]
    fn tape_consumed_after_backward() {
        let tape = Tape::new();
        let w = tape.watch(&Tensor::<f64>::scalar(2.0));
        let loss = sum(&w).unwrap();
        backward(&loss).unwrap();
        assert!(matches!(sum(&w), Err(Error::Tape(_))));
    }

    #[test]
    fn voting_group_mean_halves_alternating() {
        // pre-voting output alternating (1,0) per pair -> class rate 0.5.
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = mean_groups(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_transpose_upsamples_shape() {
        let x = Tensor::<f64>::full(&[1, 2, 8, 8], 0.1);
        let w = Tensor::full(&[2, 3, 4, 4], 0.05);
        let b = Tensor::zeros(&[3]);
        let y = conv_transpose2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
    }
}
