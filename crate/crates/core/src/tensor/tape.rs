//! Gradient tape: op records, reverse pass, gradient lookup.

use super::kernels::{self, ConvGeom};
use super::{NodeRef, Scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

/// A saved operand: optional node id for gradient routing plus the forward
/// value for backward math.
pub(crate) struct Src<S: Scalar> {
    pub id: Option<usize>,
    pub data: Arc<Vec<S>>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Src<S> {
    pub(crate) fn of(t: &Tensor<S>) -> Self {
        Src {
            id: t.node.as_ref().map(|n| n.id),
            data: t.data_arc(),
            shape: t.shape().to_vec(),
        }
    }
}

pub(crate) enum UnaryKind<S: Scalar> {
    Scale(S),
    AddScalar,
    Tanh { y: Arc<Vec<S>> },
    Clamp { lo: S, hi: S },
    /// Heaviside spike (or its smooth arctan primitive); backward is the
    /// arctan surrogate derivative in both modes.
    Spike { theta: S, alpha: S },
}

pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Record<S: Scalar> {
    Leaf,
    Unary {
        x: Src<S>,
        kind: UnaryKind<S>,
    },
    Binary {
        a: Src<S>,
        b: Src<S>,
        kind: BinKind,
    },
    Conv2d {
        x: Src<S>,
        w: Src<S>,
        b: Src<S>,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the equivalent forward conv
    /// (whose input is this op's output).
    ConvT2d {
        x: Src<S>,
        w: Src<S>,
        b: Src<S>,
        geom: ConvGeom,
    },
    Linear {
        x: Src<S>,
        w: Src<S>,
        b: Src<S>,
    },
    ChannelAffine {
        x: Src<S>,
        gain: Src<S>,
        bias: Src<S>,
    },
    ScaleChannels {
        x: Src<S>,
        factors: Arc<Vec<S>>,
    },
    MaxPool2 {
        x: Src<S>,
        argmax: Vec<u32>,
    },
    Reshape {
        x: Src<S>,
    },
    MeanGroups {
        x: Src<S>,
        group: usize,
    },
    Dropout {
        x: Src<S>,
        mask: Arc<Vec<S>>,
    },
    MseLoss {
        pred: Src<S>,
        target: Src<S>,
    },
    Sum {
        x: Src<S>,
    },
}

struct Node<S: Scalar> {
    rec: Record<S>,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Reverse-mode gradient tape. Cloning shares the underlying record.
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers a tensor as a differentiable leaf and returns the tracked view.
    pub fn watch(&self, t: &Tensor<S>) -> Tensor<S> {
        let id = self
            .record(Record::Leaf)
            .expect("watch on a consumed tape");
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn record(&self, rec: Record<S>) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape(
                "tape already consumed by backward()".to_string(),
            ));
        }
        inner.nodes.push(Node { rec });
        Ok(inner.nodes.len() - 1)
    }
}

/// Gradients of a scalar loss with respect to the watched leaves of one tape.
pub struct Gradients<S: Scalar> {
    tape: Tape<S>,
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a tensor tracked on the tape the backward pass ran on.
    /// Leaves never reached by the loss get a zero gradient.
    pub fn wrt(&self, t: &Tensor<S>) -> Result<Vec<S>> {
        let node = t
            .node
            .as_ref()
            .ok_or_else(|| Error::Tape("gradient requested for untracked tensor".to_string()))?;
        if !node.tape.same_tape(&self.tape) {
            return Err(Error::Tape("tensor belongs to a different tape".to_string()));
        }
        Ok(match &self.by_node[node.id] {
            Some(g) => g.clone(),
            None => vec![S::zero(); t.numel()],
        })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: Vec<S>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a = *a + *c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn accumulate_into<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    src: &Src<S>,
    contrib: Vec<S>,
) {
    if let Some(id) = src.id {
        accumulate(&mut grads[id], contrib);
    }
}

/// Surrogate derivative of the spike op: alpha/2 / (1 + (pi*alpha*u/2)^2)
/// at membrane offset u = v - theta.
pub(crate) fn spike_surrogate<S: Scalar>(v: S, theta: S, alpha: S) -> S {
    let pi = S::from_f64(std::f64::consts::PI);
    let two = S::from_f64(2.0);
    let u = v - theta;
    let t = pi * alpha * u / two;
    (alpha / two) / (S::one() + t * t)
}

/// Runs the reverse pass from a scalar loss. Consumes the tape: the op
/// records are dropped and further recording on it is an error.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<Gradients<S>> {
    let node = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::Tape("backward() on a detached tensor (no tape)".to_string()))?;
    if loss.numel() != 1 {
        return Err(Error::Tape(format!(
            "backward() needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let tape = node.tape.clone();
    let nodes = {
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape("tape already consumed by backward()".to_string()));
        }
        inner.consumed = true;
        std::mem::take(&mut inner.nodes)
    };

    let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
    grads[node.id] = Some(vec![S::one()]);

    for id in (0..=node.id).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        match &nodes[id].rec {
            Record::Leaf => {
                // keep leaf gradients for lookup
                grads[id] = Some(g);
            }
            Record::Unary { x, kind } => {
                let gx: Vec<S> = match kind {
                    UnaryKind::Scale(c) => g.iter().map(|gv| *gv * *c).collect(),
                    UnaryKind::AddScalar => g.clone(),
                    UnaryKind::Tanh { y } => g
                        .iter()
                        .zip(y.iter())
                        .map(|(gv, yv)| *gv * (S::one() - *yv * *yv))
                        .collect(),
                    UnaryKind::Clamp { lo, hi } => g
                        .iter()
                        .zip(x.data.iter())
                        .map(|(gv, xv)| {
                            if *xv > *lo && *xv < *hi {
                                *gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                    UnaryKind::Spike { theta, alpha } => g
                        .iter()
                        .zip(x.data.iter())
                        .map(|(gv, xv)| *gv * spike_surrogate(*xv, *theta, *alpha))
                        .collect(),
                };
                accumulate_into(&mut grads, x, gx);
            }
            Record::Binary { a, b, kind } => match kind {
                BinKind::Add => {
                    accumulate_into(&mut grads, a, g.clone());
                    accumulate_into(&mut grads, b, g);
                }
                BinKind::Sub => {
                    accumulate_into(&mut grads, a, g.clone());
                    accumulate_into(&mut grads, b, g.iter().map(|v| -*v).collect());
                }
                BinKind::Mul => {
                    let ga: Vec<S> = g.iter().zip(b.data.iter()).map(|(gv, bv)| *gv * *bv).collect();
                    let gb: Vec<S> = g.iter().zip(a.data.iter()).map(|(gv, av)| *gv * *av).collect();
                    accumulate_into(&mut grads, a, ga);
                    accumulate_into(&mut grads, b, gb);
                }
            },
            Record::Conv2d { x, w, b, geom } => {
                if x.id.is_some() {
                    accumulate_into(&mut grads, x, kernels::conv2d_bwd_input(&g, &w.data, geom));
                }
                if w.id.is_some() {
                    accumulate_into(&mut grads, w, kernels::conv2d_bwd_weight(&g, &x.data, geom));
                }
                if b.id.is_some() {
                    accumulate_into(&mut grads, b, kernels::conv2d_bwd_bias(&g, geom));
                }
            }
            Record::ConvT2d { x, w, b, geom } => {
                // geom describes the forward conv whose input is this op's
                // output, so the roles of the conv kernels swap.
                if x.id.is_some() {
                    accumulate_into(&mut grads, x, kernels::conv2d_forward(&g, &w.data, None, geom));
                }
                if w.id.is_some() {
                    accumulate_into(&mut grads, w, kernels::conv2d_bwd_weight(&x.data, &g, geom));
                }
                if b.id.is_some() {
                    // bias is per output channel = geom.cin of the equivalent forward conv
                    let (ho, wo) = (geom.h, geom.w);
                    let mut gb = vec![S::zero(); geom.cin];
                    for n in 0..geom.n {
                        for c in 0..geom.cin {
                            let base = (n * geom.cin + c) * ho * wo;
                            let mut acc = S::zero();
                            for v in &g[base..base + ho * wo] {
                                acc = acc + *v;
                            }
                            gb[c] = gb[c] + acc;
                        }
                    }
                    accumulate_into(&mut grads, b, gb);
                }
            }
            Record::Linear { x, w, b } => {
                let (n, f) = (x.shape[0], x.shape[1]);
                let o = w.shape[0];
                let (gx, gw, gb) = kernels::linear_bwd(&g, &x.data, &w.data, n, f, o);
                accumulate_into(&mut grads, x, gx);
                accumulate_into(&mut grads, w, gw);
                accumulate_into(&mut grads, b, gb);
            }
            Record::ChannelAffine { x, gain, bias } => {
                let (n, c, h, w2) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w2;
                let mut gx = vec![S::zero(); x.data.len()];
                let mut gg = vec![S::zero(); c];
                let mut gb = vec![S::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let gv = gain.data[ch];
                        let mut accg = S::zero();
                        let mut accb = S::zero();
                        for j in 0..hw {
                            let go = g[base + j];
                            gx[base + j] = go * gv;
                            accg = accg + go * x.data[base + j];
                            accb = accb + go;
                        }
                        gg[ch] = gg[ch] + accg;
                        gb[ch] = gb[ch] + accb;
                    }
                }
                accumulate_into(&mut grads, x, gx);
                accumulate_into(&mut grads, gain, gg);
                accumulate_into(&mut grads, bias, gb);
            }
            Record::ScaleChannels { x, factors } => {
                let (n, c, h, w2) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w2;
                let mut gx = vec![S::zero(); x.data.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let f = factors[ch];
                        for j in 0..hw {
                            gx[base + j] = g[base + j] * f;
                        }
                    }
                }
                accumulate_into(&mut grads, x, gx);
            }
            Record::MaxPool2 { x, argmax } => {
                let mut gx = vec![S::zero(); x.data.len()];
                for (gv, &src) in g.iter().zip(argmax.iter()) {
                    gx[src as usize] = gx[src as usize] + *gv;
                }
                accumulate_into(&mut grads, x, gx);
            }
            Record::Reshape { x } => {
                accumulate_into(&mut grads, x, g);
            }
            Record::MeanGroups { x, group } => {
                let inv = S::one() / S::from_f64(*group as f64);
                let mut gx = vec![S::zero(); x.data.len()];
                for (i, gv) in g.iter().enumerate() {
                    for j in 0..*group {
                        gx[i * group + j] = *gv * inv;
                    }
                }
                accumulate_into(&mut grads, x, gx);
            }
            Record::Dropout { x, mask } => {
                let gx: Vec<S> = g.iter().zip(mask.iter()).map(|(gv, m)| *gv * *m).collect();
                accumulate_into(&mut grads, x, gx);
            }
            Record::MseLoss { pred, target } => {
                let count = S::from_f64(pred.data.len() as f64);
                let two = S::from_f64(2.0);
                let go = g[0];
                if pred.id.is_some() {
                    let gp: Vec<S> = pred
                        .data
                        .iter()
                        .zip(target.data.iter())
                        .map(|(p, t)| go * two * (*p - *t) / count)
                        .collect();
                    accumulate_into(&mut grads, pred, gp);
                }
                if target.id.is_some() {
                    let gt: Vec<S> = pred
                        .data
                        .iter()
                        .zip(target.data.iter())
                        .map(|(p, t)| -(go * two * (*p - *t) / count))
                        .collect();
                    accumulate_into(&mut grads, target, gt);
                }
            }
            Record::Sum { x } => {
                let go = g[0];
                accumulate_into(&mut grads, x, vec![go; x.data.len()]);
            }
        }
    }

    Ok(Gradients {
        tape,
        by_node: grads,
    })
}
