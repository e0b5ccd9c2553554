use std::collections::BTreeMap;

use super::array::Array;
use super::params::ParameterStore;
use super::real::Real;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub first_moment: BTreeMap<String, Array<F>>,
    pub second_moment: BTreeMap<String, Array<F>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter, then clears gradients.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn adam_step<F: Real>(params: &mut ParameterStore<F>, state: &mut AdamState<F>) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGradient(name.to_owned()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    let lr = F::of(state.lr);
    let eps = F::of(state.epsilon);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let m = state
            .first_moment
            .entry(name.to_owned())
            .or_insert_with(|| Array::zeros(grad.shape()));
        let v = state
            .second_moment
            .entry(name.to_owned())
            .or_insert_with(|| Array::zeros(grad.shape()));
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
