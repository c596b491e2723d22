use std::collections::BTreeMap;

use super::{Grouping, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{BatchOutput, ModelInputs, PrectrModel, NUM_LEVELS};
use crate::numerics::{log_softmax, softmax, NodeId, ParamStore, Tape, Tensor};

/// Pointwise binary cross-entropy of final scores against clicks.
pub fn ctr_risk(scores: &[f64], clicks: &[bool]) -> Result<f64> {
    if scores.len() != clicks.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} clicks",
            scores.len(),
            clicks.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Validation("ctr_risk of an empty batch".into()));
    }
    let mut sum = 0.0;
    for (&f, &y) in scores.iter().zip(clicks) {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Validation(format!("score {f} is outside (0, 1)")));
        }
        sum += if y { f.ln() } else { (1.0 - f).ln() };
    }
    Ok(-sum / scores.len() as f64)
}

/// `alpha * y + beta * (1 - y) * rsl`.
pub fn listwise_label(click: bool, rsl: u8, alpha: f64, beta: f64) -> f64 {
    if click {
        alpha
    } else {
        beta * rsl as f64
    }
}

/// `KL(softmax(labels) || softmax(scores))`.
pub fn consistency_regularizer(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Validation(format!(
            "the regularizer needs at least 2 items, got {}",
            scores.len()
        )));
    }
    let lp = log_softmax(labels)?;
    let lq = log_softmax(scores)?;
    Ok(lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum())
}

/// Mean multi-class cross-entropy of RSL logits against levels `1..=4`.
pub fn relevance_cross_entropy(tape: &mut Tape, logits: NodeId, levels: &[u8]) -> Result<NodeId> {
    let n = levels.len();
    if n == 0 {
        return Err(Error::Validation("relevance cross-entropy of an empty batch".into()));
    }
    let mut onehot = vec![0.0; n * NUM_LEVELS];
    for (k, &l) in levels.iter().enumerate() {
        if !(1..=NUM_LEVELS as u8).contains(&l) {
            return Err(Error::Validation(format!("relevance level {l} is outside 1..=4")));
        }
        onehot[k * NUM_LEVELS + l as usize - 1] = 1.0;
    }
    let onehot = tape.constant_matrix(n, NUM_LEVELS, onehot)?;
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(onehot, ls)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Graph nodes of the Stage-2 objective for one minibatch.
#[derive(Clone, Debug)]
pub struct RiskNodes {
    pub output: BatchOutput,
    pub ctr: NodeId,
    /// Absent when the effective `gamma` is zero.
    pub regularizer: Option<NodeId>,
    pub total: NodeId,
}

fn ctr_node(tape: &mut Tape, f: NodeId, clicks: &[f64]) -> Result<NodeId> {
    let n = clicks.len();
    let y = tape.constant_matrix(n, 1, clicks.to_vec())?;
    let not_y = tape.constant_matrix(n, 1, clicks.iter().map(|c| 1.0 - c).collect())?;
    let ln_f = tape.ln(f, crate::numerics::LOG_FLOOR)?;
    let neg = tape.scale(f, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let ln_1f = tape.ln(one_minus, crate::numerics::LOG_FLOOR)?;
    let a = tape.mul(y, ln_f)?;
    let b = tape.mul(not_y, ln_1f)?;
    let ll = tape.add(a, b)?;
    let s = tape.sum(ll)?;
    tape.scale(s, -1.0 / n as f64)
}

/// KL of one list; `scores` is `1 x n`.
fn kl_node(tape: &mut Tape, scores: NodeId, labels: &[f64]) -> Result<NodeId> {
    let p = softmax(labels)?;
    let entropy_term: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let pc = tape.constant(Tensor::matrix(1, p.len(), p)?);
    let lq = tape.log_softmax_rows(scores)?;
    let cross = tape.mul(pc, lq)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    tape.add_scalar(neg, entropy_term)
}

fn regularizer_node(
    tape: &mut Tape,
    f: NodeId,
    labels: &[f64],
    inputs: &ModelInputs,
    rows: &[usize],
    grouping: Grouping,
) -> Result<Option<NodeId>> {
    let n = rows.len();
    match grouping {
        Grouping::Batch => {
            if n < 2 {
                return Err(Error::Validation(format!(
                    "the regularizer needs at least 2 items, got {n}"
                )));
            }
            let s = tape.reshape(f, 1, n)?;
            kl_node(tape, s, labels).map(Some)
        }
        Grouping::QueryGroup => {
            let mut groups: BTreeMap<(u32, &str), Vec<usize>> = BTreeMap::new();
            for (k, &r) in rows.iter().enumerate() {
                let s = &inputs.samples[r];
                groups.entry((s.user_id, s.query_text.as_str())).or_default().push(k);
            }
            let mut acc = None;
            let mut count = 0usize;
            for members in groups.values().filter(|m| m.len() >= 2) {
                let m = members.len();
                let mut sel = vec![0.0; m * n];
                for (j, &k) in members.iter().enumerate() {
                    sel[j * n + k] = 1.0;
                }
                let sel = tape.constant_matrix(m, n, sel)?;
                let sub = tape.matmul(sel, f)?;
                let sub = tape.reshape(sub, 1, m)?;
                let lab: Vec<f64> = members.iter().map(|&k| labels[k]).collect();
                let kl = kl_node(tape, sub, &lab)?;
                acc = Some(match acc {
                    None => kl,
                    Some(a) => tape.add(a, kl)?,
                });
                count += 1;
            }
            match acc {
                Some(a) => tape.scale(a, 1.0 / count as f64).map(Some),
                None => Ok(None),
            }
        }
    }
}

/// Builds the Stage-2 objective for `rows` on `tape`.
pub fn risk_graph(
    model: &PrectrModel,
    store: &ParamStore,
    tape: &mut Tape,
    inputs: &ModelInputs,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<RiskNodes> {
    let output = model.forward_with(store, tape, inputs, rows)?;
    let clicks: Vec<f64> = rows.iter().map(|&r| inputs.samples[r].click as u8 as f64).collect();
    let ctr = ctr_node(tape, output.final_score, &clicks)?;
    let gamma = cfg.effective_gamma();
    let regularizer = if gamma > 0.0 {
        let labels: Vec<f64> = rows
            .iter()
            .map(|&r| {
                let s = &inputs.samples[r];
                listwise_label(s.click, s.rsl, cfg.alpha, cfg.beta)
            })
            .collect();
        regularizer_node(tape, output.final_score, &labels, inputs, rows, cfg.grouping)?
    } else {
        None
    };
    let total = match regularizer {
        Some(reg) => {
            let weighted = tape.scale(reg, gamma)?;
            tape.add(ctr, weighted)?
        }
        None => ctr,
    };
    Ok(RiskNodes {
        output,
        ctr,
        regularizer,
        total,
    })
}
