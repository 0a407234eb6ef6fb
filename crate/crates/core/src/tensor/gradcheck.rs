use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared absolutely rather than
/// relatively. A central difference at eps 1e-5 of a loss built from a few
/// thousand ops carries round-off near 1e-10 to 1e-9, which would swamp the
/// relative error of gradients that are exactly zero (attention key biases).
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// Worst error per group, where `group` maps a parameter name to its group
    /// label. Groups keep first-seen order.
    pub fn by_group(&self, group: impl Fn(&str) -> String) -> Vec<(String, f64, usize)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for e in &self.entries {
            let label = group(&e.name);
            match out.iter_mut().find(|(l, _, _)| *l == label) {
                Some(slot) => {
                    slot.1 = slot.1.max(e.max_rel_err);
                    slot.2 += 1;
                }
                None => out.push((label, e.max_rel_err, 1)),
            }
        }
        out
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `analytic` gradients (one tensor per parameter, in store order)
/// against central differences `(f(w+eps) - f(w-eps)) / 2eps` of `value`.
/// Only parameters accepted by `select` are checked.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Tensor],
    value: impl Fn(&ParamStore) -> Result<f64>,
    eps: f64,
    tol: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let mut probe = store.clone();
    let mut entries = Vec::new();
    for (id, grad) in store.ids().zip(analytic) {
        let name = store.name(id).to_string();
        if !select(&name) {
            continue;
        }
        let mut worst = ParamCheck {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..store.value(id).len() {
            let w0 = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = w0 + eps;
            let up = value(&probe)?;
            probe.value_mut(id).data_mut()[i] = w0 - eps;
            let down = value(&probe)?;
            probe.value_mut(id).data_mut()[i] = w0;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing `{}`[{i}]", worst.name)));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[i];
            let err = rel_err(a, numeric);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err.max(worst.max_rel_err);
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { eps, tol, entries })
}

/// Finite-difference check of every parameter that `loss` touches.
pub fn grad_check(
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> Result<(Graph, Var)>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (g, l) = loss(store)?;
    if !g.value(l).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = g.backward(l)?;
    let mut analytic: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape().to_vec())).collect();
    for (id, t) in g.param_gradients(&grads) {
        analytic[id.0] = t.clone();
    }
    check_gradients(
        store,
        &analytic,
        |s| {
            let (g, l) = loss(s)?;
            Ok(g.value(l).item())
        },
        eps,
        tol,
        |_| true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w).unwrap()).unwrap();
        s
    }

    fn square(s: &ParamStore) -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let w = g.param(s, "w")?;
        let y = g.mul(w, w)?;
        let l = g.sum(y);
        Ok((g, l))
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let s = square_store(3.0);
        let r = grad_check(&s, square, 1e-5, 1e-8).unwrap();
        assert!(r.passed());
        assert_eq!(r.entries[0].analytic, 6.0);
        assert!((r.entries[0].numeric - 6.0).abs() < 1e-8);
        assert!(r.max_rel_err() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let s = square_store(3.0);
        let wrong = vec![Tensor::scalar(7.0).unwrap()];
        let r = check_gradients(&s, &wrong, |s| Ok(square(s)?.0.value(square(s)?.1).item()), 1e-5, 1e-4, |_| true)
            .unwrap();
        assert!(!r.passed());
        assert!(r.entries[0].max_rel_err > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let s = square_store(3.0);
        let bad = check_gradients(&s, &[Tensor::scalar(0.0).unwrap()], |_| Ok(f64::NAN), 1e-5, 1e-4, |_| true);
        assert!(matches!(bad, Err(Error::NonFinite(_))));
        assert!(check_gradients(&s, &[Tensor::scalar(0.0).unwrap()], |_| Ok(0.0), 0.0, 1e-4, |_| true).is_err());
    }
}
