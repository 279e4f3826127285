use super::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between analytic and central-difference
/// gradients, overall and per parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
    /// Entries whose step was shrunk because `±h` straddled a ReLU kink.
    pub reduced_steps: usize,
}

/// Times the step may be halved to keep both probes on the same
/// smooth piece as the evaluation point.
const KINK_RETRIES: usize = 24;

/// Objective value and ReLU activation signature.
fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(f64, u64)>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let root = f(&mut g)?;
    let value = g.scalar(root);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {value}")));
    }
    Ok((value, g.activation_signature()))
}

/// Reverse-mode gradients of the scalar built by `f`.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Gradients>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let root = f(&mut g)?;
    if !g.scalar(root).is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {}", g.scalar(root))));
    }
    g.backward(root)?;
    Ok(g.param_grads())
}

/// Compare `analytic` against central differences of `f` with step `h`.
///
/// The numeric derivative is the fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Relative error per
/// entry is `|a - n| / (|a| + |n| + 1e-12)`. When a probe does not share the
/// evaluation point's ReLU activation pattern the stencil spans a kink, and
/// the step for that entry is halved (up to 24 times).
pub fn compare_with_central_differences<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    f: &F,
    analytic: &Gradients,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(params.len()),
        entries_checked: 0,
        reduced_steps: 0,
    };
    let (_, base) = evaluate(store, f)?;
    for &id in params {
        let numel = store.get(id).numel();
        let grad = analytic.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let mut worst_here = 0.0f64;
        for j in 0..numel {
            let original = store.get(id).data()[j];
            let mut step = h;
            let mut numeric;
            let mut attempt = 0;
            loop {
                let mut probe = |offset: f64| {
                    store.get_mut(id).data_mut()[j] = original + offset;
                    let r = evaluate(store, f);
                    store.get_mut(id).data_mut()[j] = original;
                    r
                };
                let (p1, s1) = probe(step)?;
                let (m1, s2) = probe(-step)?;
                let (p2, s3) = probe(2.0 * step)?;
                let (m2, s4) = probe(-2.0 * step)?;
                numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
                let smooth = [s1, s2, s3, s4].iter().all(|&s| s == base);
                if smooth || attempt == KINK_RETRIES {
                    break;
                }
                attempt += 1;
                step /= 2.0;
            }
            if attempt > 0 {
                report.reduced_steps += 1;
            }
            let a = grad[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if err > worst_here {
                worst_here = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), j));
            }
            report.entries_checked += 1;
        }
        report.per_param.push((store.name(id).to_string(), worst_here));
    }
    Ok(report)
}

/// Check reverse-mode gradients of the scalar objective `f` against central
/// finite differences for every entry of `params`.
pub fn finite_difference_check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_with_central_differences(store, params, h, &f, &analytic)
}
