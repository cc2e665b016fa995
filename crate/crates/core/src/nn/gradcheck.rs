use super::{Gradients, ParameterSet};
use crate::error::Result;

/// Compares analytic gradients against central finite differences.
///
/// `f` evaluates the scalar loss and its analytic gradients at a parameter
/// set. Returns the maximum over every trainable scalar of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &ParameterSet, epsilon: f64) -> Result<f64>
where
    F: FnMut(&ParameterSet) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.trainable_names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + epsilon;
            let (plus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - epsilon;
            let (minus, _) = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
