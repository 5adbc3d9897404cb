use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_hat: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// Parameters must arrive in the same order on every call. Nothing is
/// modified if any parameter is missing its gradient.
pub fn adam_step<'a, T, I>(params: I, state: &mut AdamState<T>) -> Result<()>
where
    T: Element,
    I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
{
    let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    if state.step_count == 0 && state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    let shapes_match = state.first_moment.len() == params.len()
        && params
            .iter()
            .zip(&state.first_moment)
            .all(|((_, t), m)| t.len() == m.len());
    if !shapes_match {
        return Err(Error::State(
            "parameter list changed between optimizer steps".into(),
        ));
    }

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64_lossy(cfg.learning_rate / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(cfg.epsilon_hat);

    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *p -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
