use std::fmt;
use std::ops::Range;

use super::{ModelInputs, PrectrModel, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::numerics::{dot, NodeId, ParamStore, Tape, Tensor};

/// Bounds applied to the final score so it stays a valid click probability.
pub const SCORE_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

const PREDICT_CHUNK: usize = 1024;

/// `sum_i g_i T_i`.
pub fn fuse(g: &[f64], t: &[f64]) -> Result<f64> {
    if g.len() != t.len() {
        return Err(Error::Dimension(format!(
            "fuse over {} click heads and {} levels",
            g.len(),
            t.len()
        )));
    }
    Ok(dot(g, t))
}

/// Nodes of one batched forward pass; every node has one row per sample.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutput {
    /// Pre-softmax RSL logits, `B x 4`. Absent for the base-only model.
    pub rsl_logits: Option<NodeId>,
    /// `T`, `B x 4`.
    pub rsl: Option<NodeId>,
    /// `g`, `B x 4` (or `B x 1` for the base-only model).
    pub base: NodeId,
    pub fused: NodeId,
    pub tau: NodeId,
    /// Attention output `r_expect`, present when some sample has history.
    pub attention: Option<NodeId>,
    pub final_score: NodeId,
}

/// Every intermediate of one sample's score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBreakdown {
    /// `T`; empty for the base-only model.
    pub rsl: Vec<f64>,
    pub base: Vec<f64>,
    pub fused: f64,
    pub tau: f64,
    pub final_score: f64,
}

impl fmt::Display for ScoreBreakdown {
    /// `final<TAB>fused<TAB>tau<TAB>T1,..,T4<TAB>g1,..,g4`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                v.iter().map(|x| format!("{x:.8}")).collect::<Vec<_>>().join(",")
            }
        };
        write!(
            f,
            "{:.8}\t{:.8}\t{:.8}\t{}\t{}",
            self.final_score,
            self.fused,
            self.tau,
            list(&self.rsl),
            list(&self.base)
        )
    }
}

impl PrectrModel {
    fn embeddings(&self, tape: &mut Tape, inputs: &ModelInputs, rows: impl Iterator<Item = usize>) -> Result<NodeId> {
        let data = inputs.gather(rows);
        let n = data.len() / inputs.dim();
        tape.constant_matrix(n, inputs.dim(), data)
    }

    fn check_inputs(&self, inputs: &ModelInputs, rows: &[usize]) -> Result<()> {
        if inputs.dim() != self.config.dim {
            return Err(Error::Dimension(format!(
                "inputs have embedding width {}, model expects {}",
                inputs.dim(),
                self.config.dim
            )));
        }
        if rows.is_empty() {
            return Err(Error::Dimension("forward over an empty batch".into()));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= inputs.len()) {
            return Err(Error::Index(format!("row {r} of {} samples", inputs.len())));
        }
        Ok(())
    }

    /// RSL logits alone, for relevance-level pretraining.
    pub fn rsl_logits_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        inputs: &ModelInputs,
        rows: &[usize],
    ) -> Result<NodeId> {
        self.check_inputs(inputs, rows)?;
        if self.config.base_only {
            return Err(Error::Precondition("the base-only model has no RSL module".into()));
        }
        let s = |r: usize| &inputs.samples[r];
        let flags: Vec<f64> = rows.iter().flat_map(|&r| s(r).flags).collect();
        let flags = tape.constant_matrix(rows.len(), 2, flags)?;
        let q = self.embeddings(tape, inputs, rows.iter().map(|&r| s(r).query))?;
        let i = self.embeddings(tape, inputs, rows.iter().map(|&r| s(r).item))?;
        let p = self.embeddings(tape, inputs, rows.iter().map(|&r| s(r).pair))?;
        let x = tape.concat_cols(&[flags, q, i, p])?;
        self.layout.rsl.forward(tape, store, x)
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &ModelInputs, rows: &[usize]) -> Result<BatchOutput> {
        self.forward_with(&self.store, tape, inputs, rows)
    }

    /// Full batched forward pass reading parameters from `store`.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        inputs: &ModelInputs,
        rows: &[usize],
    ) -> Result<BatchOutput> {
        self.check_inputs(inputs, rows)?;
        let b = rows.len();
        let s = |r: usize| &inputs.samples[r];

        let mut parts = Vec::with_capacity(self.layout.fields.len() + 2);
        for (f, &table) in self.layout.fields.iter().enumerate() {
            let bags = rows.iter().map(|&r| s(r).features.fields[f].clone()).collect();
            parts.push(tape.embedding_bag(store, table, bags)?);
        }
        let ones = tape.constant(Tensor::matrix(b, 1, vec![1.0; b])?);

        if self.config.base_only {
            let x = tape.concat_cols(&parts)?;
            let logit = self.layout.base.forward(tape, store, x)?;
            let p = tape.sigmoid(logit)?;
            let final_score = tape.clamp(p, SCORE_CLAMP.0, SCORE_CLAMP.1)?;
            return Ok(BatchOutput {
                rsl_logits: None,
                rsl: None,
                base: p,
                fused: p,
                tau: ones,
                attention: None,
                final_score,
            });
        }

        let rsl_logits = self.rsl_logits_with(store, tape, inputs, rows)?;
        let t = tape.softmax_rows(rsl_logits)?;

        let flags: Vec<f64> = rows.iter().flat_map(|&r| s(r).flags).collect();
        let flags = tape.constant_matrix(b, 2, flags)?;
        let r_cur = self.embeddings(tape, inputs, rows.iter().map(|&r| s(r).pair))?;
        parts.push(flags);
        if self.config.base_uses_relevance_embedding {
            parts.push(r_cur);
        }
        let x = tape.concat_cols(&parts)?;
        let mut logits = self.layout.base.forward(tape, store, x)?;
        if let Some(wide) = &self.layout.wide {
            let w = wide.forward(tape, store, flags)?;
            logits = tape.add(logits, w)?;
        }
        let g = tape.sigmoid(logits)?;
        let fused = tape.row_dot(g, t)?;

        let mut attention = None;
        let has_history: Vec<bool> = rows.iter().map(|&r| !s(r).history.is_empty()).collect();
        let tau = if self.config.use_prim && has_history.iter().any(|&h| h) {
            let mut segments: Vec<Range<usize>> = Vec::with_capacity(b);
            let (mut hq, mut hr) = (Vec::new(), Vec::new());
            for &r in rows {
                let start = hq.len();
                for &(q, p) in &s(r).history {
                    hq.push(q);
                    hr.push(p);
                }
                segments.push(start..hq.len());
            }
            let q_cur = self.embeddings(tape, inputs, rows.iter().map(|&r| s(r).query))?;
            let q_seq = self.embeddings(tape, inputs, hq.into_iter())?;
            let r_seq = self.embeddings(tape, inputs, hr.into_iter())?;
            let r_expect = self.attend(store, tape, q_cur, q_seq, r_seq, segments)?;
            attention = Some(r_expect);
            let raw = self.incentive_node(store, tape, r_cur, r_expect)?;
            tape.mask_rows(raw, has_history, 1.0)?
        } else {
            ones
        };
        let scaled = tape.mul(tau, fused)?;
        let final_score = tape.clamp(scaled, SCORE_CLAMP.0, SCORE_CLAMP.1)?;
        Ok(BatchOutput {
            rsl_logits: Some(rsl_logits),
            rsl: Some(t),
            base: g,
            fused,
            tau,
            attention,
            final_score,
        })
    }

    /// Target attention of projected current queries over projected history.
    fn attend(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        q_cur: NodeId,
        q_seq: NodeId,
        r_seq: NodeId,
        segments: Vec<Range<usize>>,
    ) -> Result<NodeId> {
        let wq = tape.param(store, self.layout.w_q)?;
        let wk = tape.param(store, self.layout.w_k)?;
        let wv = tape.param(store, self.layout.w_v)?;
        let q = tape.matmul_nt(q_cur, wq)?;
        let k = tape.matmul_nt(q_seq, wk)?;
        let v = tape.matmul_nt(r_seq, wv)?;
        tape.segment_attention(q, k, v, segments, self.config.heads)
    }

    /// `2 sigmoid(M([r_cur, r_expect]))`.
    fn incentive_node(&self, store: &ParamStore, tape: &mut Tape, r_cur: NodeId, r_expect: NodeId) -> Result<NodeId> {
        let x = tape.concat_cols(&[r_cur, r_expect])?;
        let z = self.layout.incentive.forward(tape, store, x)?;
        let sig = tape.sigmoid(z)?;
        tape.scale(sig, 2.0)
    }

    /// `r_expect` for one current query over a non-empty history.
    pub fn current_preference(&self, q_cur: &[f64], q_seq: &[Vec<f64>], r_seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.config.dim;
        if q_seq.is_empty() {
            return Err(Error::Precondition("target attention over an empty history".into()));
        }
        if q_seq.len() != r_seq.len() {
            return Err(Error::Dimension(format!(
                "{} history queries but {} relevance embeddings",
                q_seq.len(),
                r_seq.len()
            )));
        }
        if q_cur.len() != d || q_seq.iter().chain(r_seq).any(|v| v.len() != d) {
            return Err(Error::Dimension(format!("attention inputs must have width {d}")));
        }
        let m = q_seq.len();
        let mut tape = Tape::new();
        let q = tape.constant_matrix(1, d, q_cur.to_vec())?;
        let k = tape.constant_matrix(m, d, q_seq.concat())?;
        let v = tape.constant_matrix(m, d, r_seq.concat())?;
        let out = self.attend(&self.store, &mut tape, q, k, v, vec![0..m])?;
        Ok(tape.value(out).data().to_vec())
    }

    /// `tau` for a current relevance embedding and an expected one.
    pub fn incentive(&self, r_cur: &[f64], r_expect: &[f64]) -> Result<f64> {
        let d = self.config.dim;
        if r_cur.len() != d || r_expect.len() != d {
            return Err(Error::Dimension(format!(
                "incentive inputs of width {} and {}, expected {d}",
                r_cur.len(),
                r_expect.len()
            )));
        }
        let mut tape = Tape::new();
        let a = tape.constant_matrix(1, d, r_cur.to_vec())?;
        let b = tape.constant_matrix(1, d, r_expect.to_vec())?;
        let t = self.incentive_node(&self.store, &mut tape, a, b)?;
        Ok(tape.scalar(t))
    }

    /// Breakdown of every listed sample.
    pub fn score_breakdowns(&self, inputs: &ModelInputs, rows: &[usize]) -> Result<Vec<ScoreBreakdown>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, inputs, chunk)?;
            let t = o.rsl.map(|n| tape.value(n).clone());
            let g = tape.value(o.base);
            for k in 0..chunk.len() {
                out.push(ScoreBreakdown {
                    rsl: t.as_ref().map(|t| t.row(k).to_vec()).unwrap_or_default(),
                    base: g.row(k).to_vec(),
                    fused: tape.value(o.fused).row(k)[0],
                    tau: tape.value(o.tau).row(k)[0],
                    final_score: tape.value(o.final_score).row(k)[0],
                });
            }
        }
        Ok(out)
    }

    /// Final scores for all samples, in order.
    pub fn predict(&self, inputs: &ModelInputs) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..inputs.len()).collect();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, inputs, chunk)?;
            out.extend_from_slice(tape.value(o.final_score).data());
        }
        Ok(out)
    }

    /// Predicted relevance level (`1..=4`) per sample: the argmax of `T`.
    pub fn predict_rsl(&self, inputs: &ModelInputs) -> Result<Vec<u8>> {
        let rows: Vec<usize> = (0..inputs.len()).collect();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let z = self.rsl_logits_with(&self.store, &mut tape, inputs, chunk)?;
            let z = tape.value(z);
            for k in 0..chunk.len() {
                let row = z.row(k);
                let best = (0..NUM_LEVELS).fold(0, |b, l| if row[l] > row[b] { l } else { b });
                out.push(best as u8 + 1);
            }
        }
        Ok(out)
    }
}
