//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::tensorkit::{Gradients, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over trainable entries of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// parameter name and flat index of the worst entry
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::dim("gradient check needs a scalar loss"));
    }
    let v = v.get(0, 0);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradients of the scalar built by `f`.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).get(0, 0);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok((v, g.backward(loss)?))
}

/// Compares backprop against central differences with step `delta` on every trainable entry.
///
/// `f` must be a deterministic function of the parameter values.
pub fn grad_check<F>(store: &ParamStore, delta: f64, mode: ExecMode, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var> + Sync + Send,
{
    if delta <= 0.0 {
        return Err(Error::Input(format!("finite-difference step must be positive, got {delta}")));
    }
    let (_, grads) = analytic_gradients(store, &f)?;

    let entries: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();

    let errors = par::map_range_init(
        mode,
        entries.len(),
        || store.clone(),
        |scratch, k| -> Result<f64> {
            let (id, i) = entries[k];
            let orig = scratch.value(id).data()[i];
            scratch.get_mut(id).value.data_mut()[i] = orig + delta;
            let plus = eval_loss(scratch, &f);
            scratch.get_mut(id).value.data_mut()[i] = orig - delta;
            let minus = eval_loss(scratch, &f);
            scratch.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * delta);
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            Ok((analytic - numeric).abs() / numeric.abs().max(1.0))
        },
    );

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: entries.len(),
    };
    for (k, err) in errors.into_iter().enumerate() {
        let err = err?;
        if err > report.max_rel_error || report.worst.is_none() {
            let (id, i) = entries[k];
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.get(id).name.clone(), i));
        }
    }
    Ok(report)
}
