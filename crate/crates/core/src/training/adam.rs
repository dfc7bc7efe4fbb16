use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self
    where
        S: 'a,
    {
        let m: Vec<Vec<S>> = params.into_iter().map(|p| vec![S::zero(); p.len()]).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Option<&Tensor<S>>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = S::lit(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = S::lit(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
    let one = S::one();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.len() || grads[i].is_some_and(|g| g.len() != p.len()) {
            return Err(Error::dim("adam", format!("tensor {i} changed size")));
        }
        let g = grads[i].map(|g| g.data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(S::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] * c1;
            let vhat = v[j] * c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
