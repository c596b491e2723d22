use std::collections::BTreeMap;

use super::params::{LrGroup, ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_group: BTreeMap<LrGroup, f64>,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the tape gradient of `loss` with central differences
/// `(L(v + eps) - L(v - eps)) / (2 eps)` on every scalar of `params`
/// (all parameters when `None`).
///
/// The error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// `store` is restored exactly before returning; its gradients hold the
/// analytic result.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: Option<&[ParamId]>,
    epsilon: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Precondition(format!("epsilon must be positive, got {epsilon}")));
    }
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {base}")));
    }
    tape.backward(out, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(store, &mut tape)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss became non-finite under perturbation: {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_group: BTreeMap::new(),
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        let group = store.get(id).group;
        let n = store.value(id).len();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + epsilon;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - epsilon;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let analytic = store.grad(id).data()[k];
            let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let err = (analytic - numeric).abs() / scale;
            let slot = report.per_group.entry(group).or_insert(0.0);
            *slot = slot.max(err);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((store.get(id).name.clone(), k));
                }
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
