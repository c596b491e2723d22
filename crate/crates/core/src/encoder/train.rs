use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TextEncoder;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Sgd, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier on `lr` during fine-tuning.
    pub finetune_lr_factor: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 0.5,
            finetune_lr_factor: 0.1,
            seed: 42,
        }
    }
}

impl EncoderTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("encoder batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Validation(format!("encoder lr must be >= 0, got {}", self.lr)));
        }
        if !(self.finetune_lr_factor >= 0.0) || !self.finetune_lr_factor.is_finite() {
            return Err(Error::Validation(format!(
                "finetune_lr_factor must be >= 0, got {}",
                self.finetune_lr_factor
            )));
        }
        Ok(())
    }
}

/// Binary relatedness training on implicit feedback: clicked pairs are
/// positives. Returns the mean loss of each epoch.
pub fn pretrain_encoder(
    enc: &mut TextEncoder,
    pairs: &[(String, String, bool)],
    cfg: &EncoderTrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("pretrain_encoder needs at least one pair".into()));
    }
    let positives = pairs.iter().filter(|p| p.2).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::Training(
            "pretrain_encoder needs both clicked and unclicked pairs".into(),
        ));
    }
    let bags: Vec<Vec<usize>> = pairs.iter().map(|(q, i, _)| enc.pair_bag(q, i)).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect();
    run_epochs(enc, &bags, cfg.lr, cfg, |tape, enc, emb, rows| {
        let head = enc.binary_head();
        let z = head.forward(tape, enc.store(), emb)?;
        let y: Vec<f64> = rows.iter().map(|&r| labels[r]).collect();
        binary_cross_entropy(tape, z, y)
    })
}

/// Four-class training on graded relevance labels in `1..=4`, at
/// `lr * finetune_lr_factor`. An empty example list is a no-op.
pub fn finetune_encoder(
    enc: &mut TextEncoder,
    labeled: &[(String, String, u8)],
    cfg: &EncoderTrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if let Some((q, i, l)) = labeled.iter().find(|p| !(1..=4).contains(&p.2)) {
        return Err(Error::Validation(format!(
            "relevance label {l} for ({q:?}, {i:?}) is outside 1..=4"
        )));
    }
    if labeled.is_empty() {
        return Ok(Vec::new());
    }
    let bags: Vec<Vec<usize>> = labeled.iter().map(|(q, i, _)| enc.pair_bag(q, i)).collect();
    let classes: Vec<usize> = labeled.iter().map(|p| p.2 as usize - 1).collect();
    let lr = cfg.lr * cfg.finetune_lr_factor;
    run_epochs(enc, &bags, lr, cfg, |tape, enc, emb, rows| {
        let head = enc.class_head();
        let z = head.forward(tape, enc.store(), emb)?;
        let logp = tape.log_softmax_rows(z)?;
        let mut onehot = vec![0.0; rows.len() * 4];
        for (k, &r) in rows.iter().enumerate() {
            onehot[k * 4 + classes[r]] = 1.0;
        }
        let target = tape.constant(Tensor::matrix(rows.len(), 4, onehot)?);
        let picked = tape.mul(logp, target)?;
        let total = tape.sum(picked)?;
        tape.scale(total, -1.0 / rows.len() as f64)
    })
}

/// Argmax of the 4-class head for each pair, as a label in `1..=4`.
pub fn predict_relevance_class(enc: &TextEncoder, pairs: &[(String, String)]) -> Result<Vec<usize>> {
    let bags = pairs.iter().map(|(q, i)| enc.pair_bag(q, i)).collect();
    let mut tape = Tape::new();
    let emb = enc.forward(&mut tape, bags)?;
    let z = enc.class_head().forward(&mut tape, enc.store(), emb)?;
    let z = tape.value(z);
    Ok((0..z.rows())
        .map(|r| {
            let row = z.row(r);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best }) + 1
        })
        .collect())
}

/// Logit of the binary relatedness head for each pair.
pub fn relatedness_logits(enc: &TextEncoder, pairs: &[(String, String)]) -> Result<Vec<f64>> {
    let bags = pairs.iter().map(|(q, i)| enc.pair_bag(q, i)).collect();
    let mut tape = Tape::new();
    let emb = enc.forward(&mut tape, bags)?;
    let z = enc.binary_head().forward(&mut tape, enc.store(), emb)?;
    Ok(tape.value(z).data().to_vec())
}

/// `-mean(y ln s(z) + (1 - y) ln s(-z))` over a column of logits.
fn binary_cross_entropy(tape: &mut Tape, z: NodeId, y: Vec<f64>) -> Result<NodeId> {
    let n = y.len();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let p = tape.sigmoid(z)?;
    let neg = tape.scale(z, -1.0)?;
    let q = tape.sigmoid(neg)?;
    let lp = tape.ln(p, crate::numerics::LOG_FLOOR)?;
    let lq = tape.ln(q, crate::numerics::LOG_FLOOR)?;
    let yc = tape.constant(Tensor::matrix(n, 1, y)?);
    let nyc = tape.constant(Tensor::matrix(n, 1, not_y)?);
    let a = tape.mul(lp, yc)?;
    let b = tape.mul(lq, nyc)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s)?;
    tape.scale(total, -1.0 / n as f64)
}

fn run_epochs<F>(
    enc: &mut TextEncoder,
    bags: &[Vec<usize>],
    lr: f64,
    cfg: &EncoderTrainConfig,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &TextEncoder, NodeId, &[usize]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut sgd = Sgd::new();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let emb = enc.forward(&mut tape, rows.iter().map(|&r| bags[r].clone()).collect())?;
            let loss = loss_fn(&mut tape, enc, emb, rows)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "encoder".into(),
                    epoch,
                    batch: b,
                    sample_rows: rows.to_vec(),
                });
            }
            sum += value * rows.len() as f64;
            let store = enc.store_mut();
            store.zero_grad();
            tape.backward(loss, store)?;
            sgd.step(store, |_| Some(lr));
        }
        losses.push(sum / bags.len() as f64);
    }
    Ok(losses)
}
