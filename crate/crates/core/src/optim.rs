//! Adam with bias correction over named parameter sets.

use crate::tensor::{NamedTensors, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the step counter and current rate.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub step_count: u64,
    pub learning_rate: f64,
    pub first_moment: NamedTensors<S>,
    pub second_moment: NamedTensors<S>,
}

impl<S: Scalar> OptimizerState<S> {
    /// Moment buffers for exactly the given trainable parameter set.
    pub fn new(params: &NamedTensors<S>, learning_rate: f64) -> Self {
        let zeros = |p: &NamedTensors<S>| {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect()
        };
        OptimizerState {
            step_count: 0,
            learning_rate,
            first_moment: zeros(params),
            second_moment: zeros(params),
        }
    }
}

/// One Adam update. Every parameter must have a gradient entry.
pub fn adam_step<S: Scalar>(
    params: &mut NamedTensors<S>,
    grads: &NamedTensors<S>,
    state: &mut OptimizerState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let inv_bc1 = S::from_f64(1.0 / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let lr = S::from_f64(state.learning_rate);
    let eps = S::from_f64(cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("adam_step: missing gradient for {name}")))?;
        if g.shape != p.shape {
            return Err(Error::Dim {
                op: "adam_step",
                lhs: p.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let m = state.first_moment.get_mut(name).expect("moment buffer");
        let v = state.second_moment.get_mut(name).expect("moment buffer");
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + one_m_b1 * gi;
            v.data[i] = b2 * v.data[i] + one_m_b2 * gi * gi;
            let mhat = m.data[i] * inv_bc1;
            let vhat = v.data[i] * inv_bc2;
            p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
