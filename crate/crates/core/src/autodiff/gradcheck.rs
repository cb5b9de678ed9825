use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose gradient is
/// essentially zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub per_tensor: BTreeMap<String, TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_tensor
            .values()
            .map(|t| t.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

/// `|a − n| / max(|a| + |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare analytic gradients with central finite differences.
///
/// `objective` must zero the gradients, run forward and backward, leave the
/// gradients in the set and return the loss. Tensors larger than
/// `max_entries` are checked on a seeded random sample of entries.
pub fn grad_check<F>(
    params: &ParameterSet,
    objective: F,
    step: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut ParameterSet) -> Result<f64>,
{
    let mut work = params.clone();
    objective(&mut work)?;
    let analytic: BTreeMap<String, Vec<f64>> = work
        .iter()
        .map(|(name, p)| (name.to_string(), p.grad_or_zeros().into_values()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor = BTreeMap::new();
    for (name, grads) in &analytic {
        let n = grads.len();
        let indices: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut ix = sample(&mut rng, n, max_entries).into_vec();
            ix.sort_unstable();
            ix
        };
        let mut check = TensorCheck {
            entries_checked: indices.len(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &indices {
            let original = work.value(name)?.values()[i];
            work.value_mut(name)?.values_mut()[i] = original + step;
            let plus = objective(&mut work)?;
            work.value_mut(name)?.values_mut()[i] = original - step;
            let minus = objective(&mut work)?;
            work.value_mut(name)?.values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grads[i], numeric);
            if err > check.max_relative_error || !err.is_finite() {
                check.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = grads[i];
                check.numeric = numeric;
            }
        }
        per_tensor.insert(name.clone(), check);
    }
    Ok(GradCheckReport { per_tensor })
}
