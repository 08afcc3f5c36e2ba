use std::collections::BTreeSet;

use super::StatsError;

pub type IndexSet = BTreeSet<usize>;

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.
pub fn jaccard(pred: &IndexSet, prox: &IndexSet) -> f64 {
    let union = pred.union(prox).count();
    if union == 0 {
        return 1.0;
    }
    pred.intersection(prox).count() as f64 / union as f64
}

/// Fraction of predictions that are not subsets of `prox`. An empty list
/// of predictions gives 0.
pub fn fwer(predictions: &[IndexSet], prox: &IndexSet) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let bad = predictions.iter().filter(|p| !p.is_subset(prox)).count();
    bad as f64 / predictions.len() as f64
}

/// Harrell's concordance index. A pair is comparable when the subject with
/// the shorter time had an event; equal risks count one half.
pub fn c_index(risk: &[f64], times: &[f64], events: &[bool]) -> Result<f64, StatsError> {
    if risk.len() != times.len() || times.len() != events.len() {
        return Err(StatsError::DimensionMismatch(format!(
            "{} risks, {} times, {} events",
            risk.len(),
            times.len(),
            events.len()
        )));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&i, &j| times[i].total_cmp(&times[j]));
    let (mut comparable, mut concordant) = (0.0f64, 0.0f64);
    for (pos, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if times[j] <= times[i] {
                continue;
            }
            comparable += 1.0;
            if risk[i] > risk[j] {
                concordant += 1.0;
            } else if risk[i] == risk[j] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0.0 {
        return Err(StatsError::NoComparablePairs);
    }
    Ok(concordant / comparable)
}
