use super::eval::forward;
use super::loss::LossHead;
use super::params::ParamStore;
use super::value::Value;
use super::{loss_and_gradients, RuntimeError};
use crate::dsl::Term;

/// Magnitude below which gradient errors are measured absolutely rather
/// than relative to the gradient.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn loss_at(term: &Term, params: &ParamStore, input: &Value, head: &LossHead<'_>) -> Result<f64, RuntimeError> {
    let (out, _) = forward(term, params, input)?;
    Ok(head.evaluate(&out)?.0)
}

/// Largest relative error between reverse-mode gradients and central
/// differences with step `eps`, over every trainable parameter and every
/// input entry.
pub fn grad_check(
    term: &Term,
    params: &ParamStore,
    input: &Value,
    head: &LossHead<'_>,
    eps: f64,
) -> Result<f64, RuntimeError> {
    let (_, grads) = loss_and_gradients(term, params, input, head)?;
    let analytic = grads.params.flatten();
    let mut worst: f64 = 0.0;

    let mut probe = params.clone();
    let shape: Vec<usize> = probe.trainable_slices_mut().iter().map(|s| s.len()).collect();
    let mut k = 0;
    for (s, &len) in shape.iter().enumerate() {
        for j in 0..len {
            let orig = probe.trainable_slices_mut()[s][j];
            probe.trainable_slices_mut()[s][j] = orig + eps;
            let up = loss_at(term, &probe, input, head)?;
            probe.trainable_slices_mut()[s][j] = orig - eps;
            let dn = loss_at(term, &probe, input, head)?;
            probe.trainable_slices_mut()[s][j] = orig;
            worst = worst.max(relative_error(analytic[k], (up - dn) / (2.0 * eps)));
            k += 1;
        }
    }

    let analytic_in: Vec<f64> = grads.input.leaves().iter().flat_map(|t| t.data.iter().copied()).collect();
    let mut x = input.clone();
    let sizes: Vec<usize> = x.leaves().iter().map(|t| t.data.len()).collect();
    let mut k = 0;
    for (leaf, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = x.leaves_mut()[leaf].data[j];
            x.leaves_mut()[leaf].data[j] = orig + eps;
            let up = loss_at(term, params, &x, head)?;
            x.leaves_mut()[leaf].data[j] = orig - eps;
            let dn = loss_at(term, params, &x, head)?;
            x.leaves_mut()[leaf].data[j] = orig;
            worst = worst.max(relative_error(analytic_in[k], (up - dn) / (2.0 * eps)));
            k += 1;
        }
    }
    Ok(worst)
}
