use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Adam hyper-parameters. `l2_lambda` adds `l2_lambda * param` to every
/// gradient before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2_lambda: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(Tensor::zeros_like).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            hyper,
        }
    }
}

fn check_grads(params: &ModelParams, grads: &ModelParams) -> Result<()> {
    params.check_layout(grads)?;
    if grads.tensors().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState) -> Result<()> {
    check_grads(params, grads)?;
    let moments_match = state.first_moment.len() == params.len()
        && state.second_moment.len() == params.len()
        && params
            .tensors()
            .zip(state.first_moment.iter().zip(&state.second_moment))
            .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
    if !moments_match {
        return Err(Error::shape("Adam moments do not match parameter layout"));
    }

    let h = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    let moments = state.first_moment.iter_mut().zip(state.second_moment.iter_mut());
    for ((p, g), (m, v)) in params.tensors_mut().zip(grads.tensors()).zip(moments) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let param = pd[i] as f64;
            let grad = g.data()[i] as f64 + h.l2_lambda * param;
            let m1 = h.beta1 * md[i] as f64 + (1.0 - h.beta1) * grad;
            let v1 = h.beta2 * vd[i] as f64 + (1.0 - h.beta2) * grad * grad;
            md[i] = m1 as f32;
            vd[i] = v1 as f32;
            let m_hat = m1 / bc1;
            let v_hat = v1 / bc2;
            pd[i] = (param - h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon)) as f32;
        }
    }
    Ok(())
}

/// Plain gradient descent `w <- w - lr * (grad + l2 * w)`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, learning_rate: f64, l2_lambda: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.tensors_mut().zip(grads.tensors()) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            let wd = *w as f64;
            *w = (wd - learning_rate * (d as f64 + l2_lambda * wd)) as f32;
        }
    }
    Ok(())
}
