//! Restoration models `R([x, c], t)`.
//!
//! A restorer maps the current degraded state, a conditioning signal and the
//! sampling step to a prediction of the clean image. The conditioning is
//! either the null condition or a tanh-normalized observation residual.

mod conv;
mod file;
mod optim;

pub use conv::{step_embedding, Architecture, ConvRestorer, LayerLayout, RestorerParams, Scalar};
pub use file::{load_params, load_params_expecting, save_params, PARAMS_MAGIC};
pub use optim::{adam_step, AdamConfig, AdamState, EmaParams};

use crate::error::{Error, Result};
use crate::tomo::Image;

/// The second input channel of the restorer.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// No conditioning: an all-zero channel with the residual flag cleared.
    Null,
    /// A normalized residual with every value strictly inside `(-1, 1)`.
    Residual(Image),
}

impl Condition {
    pub fn residual(values: Image) -> Result<Self> {
        if values.values().iter().any(|v| !(v.abs() < 1.0)) {
            return Err(Error::Validation("residual condition values must lie in (-1, 1)".into()));
        }
        Ok(Condition::Residual(values))
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, Condition::Residual(_))
    }
}

pub trait Restorer: Sync {
    fn restore(&self, state: &Image, cond: &Condition, step: usize) -> Result<Image>;
}

impl<R: Restorer + ?Sized> Restorer for &R {
    fn restore(&self, state: &Image, cond: &Condition, step: usize) -> Result<Image> {
        (**self).restore(state, cond, step)
    }
}

/// Always returns the ground truth it was built with.
#[derive(Clone, Debug)]
pub struct OracleRestorer {
    truth: Image,
}

impl OracleRestorer {
    pub fn new(truth: Image) -> Self {
        OracleRestorer { truth }
    }
}

impl Restorer for OracleRestorer {
    fn restore(&self, state: &Image, _cond: &Condition, _step: usize) -> Result<Image> {
        state.check_shape(&self.truth, "oracle restorer")?;
        Ok(self.truth.clone())
    }
}

/// Returns the state unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, state: &Image, _cond: &Condition, _step: usize) -> Result<Image> {
        Ok(state.clone())
    }
}

/// Predicts an all-zero image.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroRestorer;

impl Restorer for ZeroRestorer {
    fn restore(&self, state: &Image, _cond: &Condition, _step: usize) -> Result<Image> {
        Ok(state.map(|_| 0.0))
    }
}
