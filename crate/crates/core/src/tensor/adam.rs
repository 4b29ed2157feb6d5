//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub t: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }
}

/// One Adam step over a parameter list. Returns the updated tensors;
/// the moment state is updated in place. Fully deterministic.
pub fn adam_step<S: Scalar>(
    params: &[Tensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    hp: AdamParams,
) -> Result<Vec<Tensor<S>>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            axis: "params",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (S::from_f64(hp.beta1), S::from_f64(hp.beta2));
    let one = S::one();
    let lr = S::from_f64(hp.lr);
    let eps = S::from_f64(hp.eps);
    let bc1 = S::from_f64(1.0 - hp.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - hp.beta2.powi(t as i32));

    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::Dimension {
                axis: "grad",
                detail: format!("param {} has {} elements, grad {}", i, p.numel(), g.len()),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut new = Vec::with_capacity(p.numel());
        for (j, (pv, gv)) in p.data().iter().zip(g).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * *gv;
            v[j] = b2 * v[j] + (one - b2) * *gv * *gv;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            new.push(*pv - lr * mhat / (vhat.sqrt() + eps));
        }
        out.push(p.with_data(new));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_keeps_params() {
        let p = vec![Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let out = adam_step(&p, &[vec![0.0, 0.0]], &mut st, AdamParams::default()).unwrap();
        assert_eq!(out[0].data(), p[0].data());
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        // With bias correction, step 1 moves each weight by ~lr*sign(g).
        let p = vec![Tensor::<f64>::from_vec(&[2], vec![0.5, 0.5]).unwrap()];
        let mut st = AdamState::new(&p);
        let hp = AdamParams::default();
        let out = adam_step(&p, &[vec![3.0, -0.01]], &mut st, hp).unwrap();
        let d0 = out[0].data()[0] - 0.5;
        let d1 = out[0].data()[1] - 0.5;
        assert!((d0 + hp.lr).abs() < 1e-6, "d0 = {}", d0);
        assert!((d1 - hp.lr).abs() < 1e-6, "d1 = {}", d1);
    }

    #[test]
    fn deterministic_given_identical_state() {
        let p = vec![Tensor::<f64>::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap()];
        let g = vec![vec![0.5, -0.25, 0.0]];
        let mut s1 = AdamState::new(&p);
        let mut s2 = AdamState::new(&p);
        let o1 = adam_step(&p, &g, &mut s1, AdamParams::default()).unwrap();
        let o2 = adam_step(&p, &g, &mut s2, AdamParams::default()).unwrap();
        assert_eq!(o1[0].data(), o2[0].data());
        assert_eq!(s1.m, s2.m);
        assert_eq!(s1.v, s2.v);
    }
}
