use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::risk::{relevance_cross_entropy, risk_graph};
use super::{RiskReport, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInputs, PrectrModel};
use crate::numerics::{LrGroup, ParamStore, Sgd, Tape};

/// Per-batch reports of a training run, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub reports: Vec<RiskReport>,
}

impl TrainingLog {
    /// Header line plus one line per batch.
    pub fn to_text(&self) -> String {
        let mut out = String::from(RiskReport::HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// Mean `total` per epoch of one stage.
    pub fn epoch_means(&self, stage: Stage) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in self.reports.iter().filter(|r| r.stage == stage) {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Learning rate of each group during Stage 1. Only the RSL module moves.
pub fn stage1_lr(cfg: &TrainConfig, group: LrGroup) -> Option<f64> {
    match group {
        LrGroup::RslFinetune => Some(cfg.lr_stage1),
        _ => None,
    }
}

/// Learning rate of each group during Stage 2.
pub fn stage2_lr(cfg: &TrainConfig, model: &ModelConfig, group: LrGroup) -> Option<f64> {
    match group {
        LrGroup::Base => Some(cfg.lr_base),
        LrGroup::RslFinetune if model.base_only => None,
        LrGroup::RslFinetune if cfg.two_stage => Some(cfg.lr_rsl_finetune),
        LrGroup::RslFinetune => Some(cfg.lr_base),
        LrGroup::Prim if model.use_prim && !model.base_only => Some(cfg.lr_prim),
        LrGroup::Prim | LrGroup::Stage1 => None,
    }
}

fn optimizer(cfg: &TrainConfig) -> Sgd {
    if cfg.momentum > 0.0 {
        Sgd::with_momentum(cfg.momentum)
    } else {
        Sgd::new()
    }
}

/// Shuffled minibatches. A trailing batch of one row joins the previous
/// batch so every list has at least two items.
fn batches(rows: &[usize], cfg: &TrainConfig, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
    let salt = match stage {
        Stage::Pretrain => 0x5354_4731,
        Stage::Joint => 0x5354_4732,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt ^ ((epoch as u64) << 32));
    let mut order = rows.to_vec();
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Runs `f` with the model's parameters moved out, so graphs can borrow
/// the model while the optimizer mutates the store.
fn with_store<T>(
    model: &mut PrectrModel,
    f: impl FnOnce(&PrectrModel, &mut ParamStore) -> Result<T>,
) -> Result<T> {
    let mut store = std::mem::take(model.store_mut());
    let out = f(model, &mut store);
    *model.store_mut() = store;
    out
}

fn non_finite(stage: Stage, epoch: usize, batch: usize, rows: &[usize]) -> Error {
    Error::NonFiniteLoss {
        stage: stage.to_string(),
        epoch,
        batch,
        sample_rows: rows.to_vec(),
    }
}

/// Stage 1: relevance-level cross-entropy on the RSL module alone.
pub fn pretrain_rsl(
    model: &mut PrectrModel,
    inputs: &ModelInputs,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if model.config().base_only {
        return Err(Error::Precondition("the base-only model has no RSL module".into()));
    }
    let classes: BTreeSet<u8> = rows.iter().map(|&r| inputs.samples[r].rsl).collect();
    if classes.len() < 2 {
        return Err(Error::Training(format!(
            "relevance pretraining needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let mut log = TrainingLog::default();
    let mut sgd = optimizer(cfg);
    with_store(model, |model, store| {
        for epoch in 0..cfg.stage1_epochs {
            for (b, batch) in batches(rows, cfg, Stage::Pretrain, epoch).iter().enumerate() {
                let mut tape = Tape::new();
                let z = model.rsl_logits_with(store, &mut tape, inputs, batch)?;
                let levels: Vec<u8> = batch.iter().map(|&r| inputs.samples[r].rsl).collect();
                let loss = relevance_cross_entropy(&mut tape, z, &levels)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(non_finite(Stage::Pretrain, epoch, b, batch));
                }
                store.zero_grad();
                tape.backward(loss, store)?;
                sgd.step(store, |g| stage1_lr(cfg, g));
                log.reports.push(RiskReport {
                    stage: Stage::Pretrain,
                    epoch,
                    batch: b,
                    ctr_risk: value,
                    regularizer: 0.0,
                    total: value,
                });
            }
        }
        Ok(())
    })?;
    Ok(log)
}

/// Stage-2 objective of `rows` under the current parameters.
pub fn total_risk(
    model: &PrectrModel,
    inputs: &ModelInputs,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<RiskReport> {
    let mut tape = Tape::new();
    let n = risk_graph(model, model.store(), &mut tape, inputs, rows, cfg)?;
    Ok(RiskReport {
        stage: Stage::Joint,
        epoch: 0,
        batch: 0,
        ctr_risk: tape.scalar(n.ctr),
        regularizer: n.regularizer.map_or(0.0, |r| tape.scalar(r)),
        total: tape.scalar(n.total),
    })
}

/// Stage 1 (unless disabled or the model has no RSL module), then joint
/// training of every enabled group on the total risk.
pub fn train_two_stage(
    model: &mut PrectrModel,
    inputs: &ModelInputs,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if rows.len() < 2 {
        return Err(Error::Validation(format!(
            "training needs at least 2 samples, got {}",
            rows.len()
        )));
    }
    let mut log = if cfg.two_stage && !model.config().base_only {
        pretrain_rsl(model, inputs, rows, cfg)?
    } else {
        TrainingLog::default()
    };
    let model_cfg = model.config().clone();
    let mut sgd = optimizer(cfg);
    with_store(model, |model, store| {
        for epoch in 0..cfg.stage2_epochs {
            for (b, batch) in batches(rows, cfg, Stage::Joint, epoch).iter().enumerate() {
                let mut tape = Tape::new();
                let n = risk_graph(model, store, &mut tape, inputs, batch, cfg)?;
                let report = RiskReport {
                    stage: Stage::Joint,
                    epoch,
                    batch: b,
                    ctr_risk: tape.scalar(n.ctr),
                    regularizer: n.regularizer.map_or(0.0, |r| tape.scalar(r)),
                    total: tape.scalar(n.total),
                };
                if !report.total.is_finite() {
                    return Err(non_finite(Stage::Joint, epoch, b, batch));
                }
                store.zero_grad();
                tape.backward(n.total, store)?;
                sgd.step(store, |g| stage2_lr(cfg, &model_cfg, g));
                log.reports.push(report);
            }
        }
        Ok(())
    })?;
    Ok(log)
}
