//! Batched evaluation and exact gradients of typed programs.

mod adam;
mod eval;
mod gradcheck;
mod loss;
mod params;
mod value;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{backward, forward, predict, GradientSet, Trace};
pub use gradcheck::{grad_check, GRAD_CHECK_FLOOR};
pub use loss::LossHead;
pub use params::{sigmoid, Dense, GateParams, MlpArch, MlpParams, ParamStore, PrimGrad, PrimGrads, PrimParams};
pub use value::{Tensor, Value};

use thiserror::Error;

use crate::cox::CoxError;
use crate::dsl::InstanceId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("non-finite value produced at `{node}`")]
    NonFiniteValue { node: String },
    #[error("shape mismatch at `{node}`: expected {expected}")]
    ShapeMismatch { node: String, expected: String },
    #[error("no parameters for primitive instance {0}")]
    MissingParams(InstanceId),
    #[error("loss head: {0}")]
    Loss(String),
    #[error(transparent)]
    Cox(#[from] CoxError),
}

/// Loss value and full gradient set for one batch.
pub fn loss_and_gradients(
    term: &crate::dsl::Term,
    params: &ParamStore,
    input: &Value,
    head: &LossHead<'_>,
) -> Result<(f64, GradientSet), RuntimeError> {
    let (out, trace) = forward(term, params, input)?;
    let (loss, g) = head.evaluate(&out)?;
    if !loss.is_finite() {
        return Err(RuntimeError::NonFiniteValue { node: "loss".to_string() });
    }
    let grads = backward(&trace, params, &g)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests;
