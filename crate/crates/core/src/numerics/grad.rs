//! Objective abstraction and a finite-difference gradient oracle.

use super::optim::{GradSet, ParamStore};
use crate::error::{Error, Result};

/// A scalar objective over the parameters in a [`ParamStore`].
pub trait Objective {
    fn loss(&self, store: &ParamStore) -> Result<f64>;

    /// Loss and analytic gradient aligned with `store`.
    fn loss_and_grad(&self, store: &ParamStore) -> Result<(f64, GradSet)>;
}

/// Evaluate `obj` and reject non-finite losses or gradients.
pub fn gradients<O: Objective + ?Sized>(obj: &O, store: &ParamStore) -> Result<(f64, GradSet)> {
    let (loss, grads) = obj.loss_and_grad(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss ({loss})")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss, grads))
}

/// Central-difference gradient of `obj`, one coordinate at a time.
pub fn numerical_gradient<O: Objective + ?Sized>(
    obj: &O,
    store: &ParamStore,
    h: f64,
) -> Result<GradSet> {
    let mut probe = store.clone();
    let mut out = GradSet::zeros_like(store);
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let fp = obj.loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let fm = obj.loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            out.get_mut(id).data_mut()[k] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Per-tensor comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub abs_error: f64,
    pub norm: f64,
}

/// Normwise relative error ‖a − n‖ / max(‖a‖, ‖n‖, floor) for every tensor.
pub fn check_gradients<O: Objective + ?Sized>(
    obj: &O,
    store: &ParamStore,
    h: f64,
    floor: f64,
) -> Result<Vec<GradCheck>> {
    let (_, analytic) = obj.loss_and_grad(store)?;
    let numeric = numerical_gradient(obj, store, h)?;
    Ok(store
        .ids()
        .map(|id| {
            let a = analytic.get(id).data();
            let n = numeric.get(id).data();
            let diff = a
                .iter()
                .zip(n)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            GradCheck {
                name: store.param(id).name.clone(),
                rel_error: diff / na.max(nn).max(floor),
                abs_error: diff,
                norm: na,
            }
        })
        .collect())
}
