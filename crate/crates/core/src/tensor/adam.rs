use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<F: Real = f32> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    pub m: Vec<Tensor<F>>,
    #[serde(skip)]
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new() }
    }
}

/// One in-place Adam update of `params` using `grads`; increments `state.step`.
pub fn adam_step<F: Real>(params: &mut [&mut Tensor<F>], grads: &[Tensor<F>], state: &mut AdamState<F>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !(state.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("adam learning rate must be non-negative, got {}", state.lr)));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err!("adam_step: parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(shape_err!("adam_step: moment buffers do not match parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let c1 = F::lit(1.0 - state.beta1.powi(t));
    let c2 = F::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (F::lit(state.lr), F::lit(state.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
