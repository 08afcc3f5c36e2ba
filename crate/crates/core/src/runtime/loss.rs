use super::value::{Tensor, Value};
use super::RuntimeError;
use crate::cox::cox_pl_loss;

/// Scalar loss applied to a program output.
#[derive(Debug, Clone, Copy)]
pub enum LossHead<'a> {
    /// Sum of every output entry.
    Sum,
    /// Mean squared error against one target per row.
    Mse { targets: &'a [f64] },
    /// Breslow negative log partial likelihood of the risk scores, stratified,
    /// divided by the number of events in the batch.
    Cox {
        times: &'a [f64],
        events: &'a [bool],
        strata: &'a [usize],
    },
}

impl LossHead<'_> {
    /// Loss and its gradient with respect to `output`.
    pub fn evaluate(&self, output: &Value) -> Result<(f64, Value), RuntimeError> {
        match self {
            LossHead::Sum => Ok((output.sum(), output.filled_like(1.0))),
            LossHead::Mse { targets } => {
                let t = scalar_output(output)?;
                if t.rows != targets.len() {
                    return Err(RuntimeError::Loss(format!("{} targets for {} rows", targets.len(), t.rows)));
                }
                let n = t.rows as f64;
                let mut loss = 0.0;
                let mut g = Vec::with_capacity(t.rows);
                for (p, y) in t.data.iter().zip(targets.iter()) {
                    let r = p - y;
                    loss += r * r;
                    g.push(2.0 * r / n);
                }
                Ok((loss / n, Value::Tensor(Tensor::column(g))))
            }
            LossHead::Cox { times, events, strata } => {
                let t = scalar_output(output)?;
                let (loss, grad) = cox_pl_loss(&t.data, times, events, strata)?;
                let d = events.iter().filter(|&&e| e).count() as f64;
                Ok((loss / d, Value::Tensor(Tensor::column(grad.into_iter().map(|v| v / d).collect()))))
            }
        }
    }
}

fn scalar_output(output: &Value) -> Result<&Tensor, RuntimeError> {
    match output {
        Value::Tensor(t) if t.cols == 1 => Ok(t),
        _ => Err(RuntimeError::Loss("expected a Tensor(1) output".to_string())),
    }
}
