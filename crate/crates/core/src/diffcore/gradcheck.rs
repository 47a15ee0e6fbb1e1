use super::tensor::{Gradients, ParamStore};
use crate::error::Result;

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares every scalar of `params` against a central difference of `loss`
/// with step `h`. The loss must be deterministic (dropout off, fixed seeds).
pub fn grad_check<F>(
    params: &ParamStore,
    analytic: &Gradients,
    h: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let original = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = original + h;
            let up = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = original - h;
            let down = loss(&probe)?;
            probe.get_mut(id).data_mut()[k] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id)[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
