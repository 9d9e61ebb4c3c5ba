use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over every checked entry.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Entries whose `±eps` stencil crosses a ReLU, abs, L1 or clamp kink,
    /// where a difference quotient does not estimate the derivative.
    pub kinked: usize,
    /// Maximum error over entries whose stencil stays on one smooth piece.
    pub max_rel_error_smooth: f64,
    pub worst_smooth: Option<(String, usize)>,
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<(Graph, Var)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.check_finite()?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck closure must return a scalar, got {:?}",
            g.value(loss).shape()
        )));
    }
    Ok((g, loss))
}

/// Compares analytic gradients of `f` with central differences for every entry of
/// `params`. The difference quotient is formed in `f64` from the actually
/// representable perturbed values.
pub fn gradcheck<F>(store: &mut ParamStore, params: &[ParamId], eps: f32, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("gradcheck eps must be positive, got {eps}")));
    }
    let (g, loss) = eval(store, &mut f)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;
    drop(g);
    let (g2, loss2) = eval(store, &mut f)?;
    if g2.value(loss2).item().to_bits() != base.to_bits() {
        return Err(Error::Contract(String::from(
            "gradcheck closure is not deterministic: repeated evaluation changed the loss",
        )));
    }
    drop(g2);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinked: 0,
        max_rel_error_smooth: 0.0,
        worst_smooth: None,
    };
    for &id in params {
        let analytic: Vec<f32> = match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => alloc::vec![0.0; store.get(id).numel()],
        };
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[k];
            let plus = orig + eps;
            let minus = orig - eps;
            store.get_mut(id).data_mut()[k] = plus;
            let lp = eval(store, &mut f).map(|(g, l)| (g.value(l).item(), g.kink_signature()));
            store.get_mut(id).data_mut()[k] = minus;
            let lm = eval(store, &mut f).map(|(g, l)| (g.value(l).item(), g.kink_signature()));
            store.get_mut(id).data_mut()[k] = orig;
            let ((lp, sp), (lm, sm)) = (lp?, lm?);
            let numeric = (lp as f64 - lm as f64) / (plus as f64 - minus as f64);
            let err = (a as f64 - numeric).abs() / (a as f64).abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((String::from(store.name(id)), k));
            }
            if sp != sm {
                report.kinked += 1;
            } else if err > report.max_rel_error_smooth || report.worst_smooth.is_none() {
                report.max_rel_error_smooth = err;
                report.worst_smooth = Some((String::from(store.name(id)), k));
            }
        }
    }
    Ok(report)
}

/// [`gradcheck`] over free input tensors instead of stored parameters.
pub fn gradcheck_inputs<F>(inputs: &[Tensor], eps: f32, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> =
        inputs.iter().enumerate().map(|(i, t)| store.add(&format!("input{i}"), t.clone())).collect();
    let ids2 = ids.clone();
    gradcheck(&mut store, &ids, eps, move |g, s| {
        let vars: Vec<Var> = ids2.iter().map(|&id| g.param(s, id)).collect();
        f(g, &vars)
    })
}
