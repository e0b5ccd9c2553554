use std::collections::BTreeMap;

use super::array::Array;
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Loss value with its analytic gradient per parameter name.
pub struct Evaluation {
    pub loss: f64,
    pub grads: BTreeMap<String, Array<f64>>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// `(f(θ + h) - f(θ - h)) / 2h` for every coordinate of every parameter.
///
/// The loss is evaluated twice at the base point; differing values are
/// reported as [`Error::NonDeterministic`].
pub fn finite_difference_check<L>(
    params: &ParameterStore<f64>,
    h: f64,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParameterStore<f64>) -> Result<Evaluation>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.loss.to_bits() != again.loss.to_bits() {
        return Err(Error::NonDeterministic {
            first: base.loss,
            second: again.loss,
        });
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let analytic = base
            .grads
            .get(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .clone();
        for idx in 0..analytic.len() {
            let original = probe.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = original + h;
            let plus = loss_fn(&probe)?.loss;
            probe.get_mut(&name)?.data_mut()[idx] = original - h;
            let minus = loss_fn(&probe)?.loss;
            probe.get_mut(&name)?.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
