use super::{Result, TrainError};
use crate::model::{Model, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay
/// (`θ ← θ − lr·wd·θ` before the moment step). Frozen parameters, and
/// parameters without a gradient, are left untouched. Gradients are checked
/// for finiteness before anything is modified.
pub fn adam_step(
    model: &mut Model,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    hp: &AdamParams,
) -> Result<()> {
    assert_eq!(grads.len(), model.params.len());
    for (p, g) in model.params.iter().zip(grads) {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    group: p.group.to_string(),
                    param: p.name.clone(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !model.is_trainable(i) {
            continue;
        }
        let theta = &mut model.params[i].data;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..theta.len() {
            theta[j] -= hp.lr * hp.weight_decay * theta[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
