use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{domain, Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub offending: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn evaluate<F>(loss: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let root = loss(&mut g, &vars)?;
    g.value(root).item()
}

/// Checks every entry of `params` with `(f(p+h) - f(p-h)) / 2h`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`. The loss is
/// evaluated twice at the base point first; differing results are reported
/// as a contract violation.
pub fn finite_diff_check<F>(
    loss: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(domain(format!(
            "finite difference step must be > 0, got {step}"
        )));
    }
    let f0 = evaluate(&loss, params)?;
    let f1 = evaluate(&loss, params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic: {f0} then {f1}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = loss(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        offending: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tolerance,
        passed: true,
    };
    for t in 0..work.len() {
        for i in 0..work[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = evaluate(&loss, &work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = evaluate(&loss, &work)?;
            work[t].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.offending.is_none() {
                report.max_relative_error = rel;
                report.offending = Some((t, i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_relative_error <= tolerance;
    Ok(report)
}
