use super::conv::{RestorerParams, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut RestorerParams<T>,
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_update(params.values_mut(), grads, state, cfg)
}

pub(crate) fn adam_update<T: Scalar>(
    values: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != values.len() || state.m.len() != values.len() || state.v.len() != values.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            values.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let corr1 = T::of(1.0 - cfg.beta1.powi(t));
    let corr2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, &g), m), v) in values.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + c1 * g;
        *v = b2 * *v + c2 * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams<T: Scalar = f32> {
    shadow: RestorerParams<T>,
    decay: f64,
}

impl<T: Scalar> EmaParams<T> {
    pub fn new(initial: RestorerParams<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Validation(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaParams { shadow: initial, decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &RestorerParams<T> {
        &self.shadow
    }

    pub fn into_shadow(self) -> RestorerParams<T> {
        self.shadow
    }

    /// `shadow <- mu * shadow + (1 - mu) * params`, elementwise.
    pub fn update(&mut self, params: &RestorerParams<T>) -> Result<()> {
        self.shadow.check_same_shape(params)?;
        let mu = T::of(self.decay);
        let rest = T::of(1.0 - self.decay);
        for (s, &p) in self.shadow.values_mut().iter_mut().zip(params.values()) {
            *s = mu * *s + rest * p;
        }
        Ok(())
    }
}
