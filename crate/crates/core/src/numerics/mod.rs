//! Dense `f64` math with reverse-mode gradients.
//!
//! [`Tape`] records primitive operations on rank-2 values and replays them
//! in reverse. Parameters live in a [`ParamStore`] outside the tape, tagged
//! with the learning-rate group the optimizer uses. The free functions here
//! ([`softmax`], [`sigmoid`], [`kl_divergence`]) are the plain-value forms
//! used by metrics and tests.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_EPSILON};
pub use layers::{Activation, Dense, Mlp};
pub use optim::Sgd;
pub use params::{glorot_bound, uniform_init, LrGroup, ParamId, ParamStore, ParamTensor};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = v.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Dimension("log_softmax of an empty vector".into()));
    }
    let lse = tape::log_sum_exp(v);
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence over {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Precondition(format!("{name} has negative or non-finite entries")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!("{name} sums to {s}, not 1")));
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Divergence(format!(
                "q[{i}] is zero where p[{i}] = {pi}"
            )));
        }
        total += pi * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln());
    }
    Ok(total.max(0.0))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    tape::dot(v, v).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    tape::dot(a, b)
}
