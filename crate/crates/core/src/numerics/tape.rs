//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every node holds a rank-2 value (`rows x cols`; scalars are `1 x 1`).
//! Nodes are appended in forward order, so walking the node list backwards
//! is a valid reverse topological order. Parameters are not owned by the
//! tape: dense parameters are copied in as leaves by [`Tape::param`] and
//! embedding tables are read in place by [`Tape::embedding_bag`].
//! [`Tape::backward`] accumulates into the gradients of a [`ParamStore`].

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Ln { input: usize, floor: f64 },
    Clamp { input: usize, lo: f64, hi: f64 },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    RowDot(usize, usize),
    Sum(usize),
    EmbeddingBag { table: ParamId, bags: Vec<Vec<usize>> },
    L2NormalizeRows { input: usize, norms: Vec<f64> },
    MaskRows { input: usize, keep: Vec<bool> },
    SegmentAttention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    query: usize,
    keys: usize,
    values: usize,
    segments: Vec<Range<usize>>,
    heads: usize,
    /// `weights[b][h]` is the softmax over segment `b` for head `h`.
    weights: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of primitive operations, replayable in reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("tape: inconsistent node shape")
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert_eq!(value.shape().len(), 2);
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op });
        NodeId { tape: self.id, idx }
    }

    fn idx(&self, node: NodeId) -> Result<usize> {
        if node.tape != self.id || node.idx >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not belong to this tape",
                node.idx
            )));
        }
        Ok(node.idx)
    }

    fn dims(&self, i: usize) -> (usize, usize) {
        let v = &self.nodes[i].value;
        (v.shape()[0], v.shape()[1])
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        let i = self.idx(node).expect("value: foreign node");
        &self.nodes[i].value
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.value(node).data()[0]
    }

    /// Constant input. Rank-1 tensors become a single row.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let (r, c) = (t.rows(), t.cols());
        let data = t.into_data();
        self.push(mat(r, c, data), Op::Constant)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::Constant))
    }

    /// Leaf holding a copy of a dense parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if id.index() >= store.len() {
            return Err(Error::Graph(format!("parameter {} not in store", id.index())));
        }
        let v = store.value(id);
        let (r, c) = (v.rows(), v.cols());
        Ok(self.push(mat(r, c, v.data().to_vec()), Op::Param(id)))
    }

    /// `a[n x k] * b[k x m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let ((n, k), (k2, m)) = (self.dims(ia), self.dims(ib));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let av = self.nodes[ia].value.data();
        let bv = self.nodes[ib].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(mat(n, m, out), Op::MatMul(ia, ib)))
    }

    /// `a[n x k] * b[m x k]^T`, the layout of a `y = W x` weight.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let ((n, k), (m, k2)) = (self.dims(ia), self.dims(ib));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt {n}x{k} by ({m}x{k2})^T")));
        }
        let av = self.nodes[ia].value.data();
        let bv = self.nodes[ib].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(mat(n, m, out), Op::MatMulNT(ia, ib)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.dims(ia) != self.dims(ib) {
            return Err(Error::Dimension(format!(
                "add {:?} and {:?}",
                self.dims(ia),
                self.dims(ib)
            )));
        }
        let (r, c) = self.dims(ia);
        let out = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x + y);
        Ok(self.push(mat(r, c, out), Op::Add(ia, ib)))
    }

    /// Adds the single-row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let ((n, m), (r, m2)) = (self.dims(ia), self.dims(ib));
        if r != 1 || m != m2 {
            return Err(Error::Dimension(format!("add_row {n}x{m} with {r}x{m2}")));
        }
        let bv = self.nodes[ib].value.data();
        let mut out = self.nodes[ia].value.data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, &b) in chunk.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(mat(n, m, out), Op::AddRow(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.dims(ia) != self.dims(ib) {
            return Err(Error::Dimension(format!(
                "mul {:?} and {:?}",
                self.dims(ia),
                self.dims(ib)
            )));
        }
        let (r, c) = self.dims(ia);
        let out = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, |x, y| x * y);
        Ok(self.push(mat(r, c, out), Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|x| x * factor).collect();
        Ok(self.push(mat(r, c, out), Op::Scale(ia, factor)))
    }

    pub fn add_scalar(&mut self, a: NodeId, shift: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|x| x + shift).collect();
        Ok(self.push(mat(r, c, out), Op::AddScalar(ia)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|&x| x.max(0.0)).collect();
        Ok(self.push(mat(r, c, out), Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|&x| super::sigmoid(x)).collect();
        Ok(self.push(mat(r, c, out), Op::Sigmoid(ia)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let mut out = self.nodes[ia].value.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(mat(r, c, out), Op::SoftmaxRows(ia)))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let mut out = self.nodes[ia].value.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(mat(r, c, out), Op::LogSoftmaxRows(ia)))
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn ln(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|&x| x.max(floor).ln()).collect();
        Ok(self.push(mat(r, c, out), Op::Ln { input: ia, floor }))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let out = self.nodes[ia].value.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Ok(self.push(mat(r, c, out), Op::Clamp { input: ia, lo, hi }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let n = self.dims(idxs[0]).0;
        if let Some(&bad) = idxs.iter().find(|&&i| self.dims(i).0 != n) {
            return Err(Error::Dimension(format!(
                "concat rows {n} vs {}",
                self.dims(bad).0
            )));
        }
        let width: usize = idxs.iter().map(|&i| self.dims(i).1).sum();
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            for &i in &idxs {
                out.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        Ok(self.push(mat(n, width, out), Op::ConcatCols(idxs)))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        if r * c != rows * cols {
            return Err(Error::Dimension(format!("reshape {r}x{c} to {rows}x{cols}")));
        }
        let out = self.nodes[ia].value.data().to_vec();
        Ok(self.push(mat(rows, cols, out), Op::Reshape(ia)))
    }

    /// Row-wise dot product of two `n x m` tensors, giving `n x 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.dims(ia) != self.dims(ib) {
            return Err(Error::Dimension(format!(
                "row_dot {:?} and {:?}",
                self.dims(ia),
                self.dims(ib)
            )));
        }
        let (n, m) = self.dims(ia);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out = (0..n).map(|r| dot(&av.data()[r * m..(r + 1) * m], &bv.data()[r * m..(r + 1) * m])).collect();
        Ok(self.push(mat(n, 1, out), Op::RowDot(ia, ib)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean-pooled rows of an embedding table, one output row per bag.
    /// An empty bag yields the zero vector.
    pub fn embedding_bag(
        &mut self,
        store: &ParamStore,
        table: ParamId,
        bags: Vec<Vec<usize>>,
    ) -> Result<NodeId> {
        if table.index() >= store.len() {
            return Err(Error::Graph(format!("parameter {} not in store", table.index())));
        }
        let t = store.value(table);
        let (rows, width) = (t.rows(), t.cols());
        let mut out = vec![0.0; bags.len() * width];
        for (b, bag) in bags.iter().enumerate() {
            let orow = &mut out[b * width..(b + 1) * width];
            for &id in bag {
                if id >= rows {
                    return Err(Error::Index(format!(
                        "id {id} out of range for table `{}` with {rows} rows",
                        store.get(table).name
                    )));
                }
                for (o, &v) in orow.iter_mut().zip(t.row(id)) {
                    *o += v;
                }
            }
            if bag.len() > 1 {
                let inv = 1.0 / bag.len() as f64;
                orow.iter_mut().for_each(|o| *o *= inv);
            }
        }
        if bags.is_empty() {
            return Err(Error::Dimension("embedding_bag with no bags".into()));
        }
        let n = bags.len();
        Ok(self.push(mat(n, width, out), Op::EmbeddingBag { table, bags }))
    }

    /// Scales every row to unit L2 norm (norms floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let mut out = self.nodes[ia].value.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let norm = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok(self.push(mat(r, c, out), Op::L2NormalizeRows { input: ia, norms }))
    }

    /// Rows where `keep` is false are replaced by `fill`.
    pub fn mask_rows(&mut self, a: NodeId, keep: Vec<bool>, fill: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        if keep.len() != r {
            return Err(Error::Dimension(format!("mask of {} for {r} rows", keep.len())));
        }
        let mut out = self.nodes[ia].value.data().to_vec();
        for (row, &k) in out.chunks_mut(c).zip(&keep) {
            if !k {
                row.iter_mut().for_each(|x| *x = fill);
            }
        }
        Ok(self.push(mat(r, c, out), Op::MaskRows { input: ia, keep }))
    }

    /// Scaled dot-product target attention over ragged segments.
    ///
    /// Row `b` of `query` attends over rows `segments[b]` of `keys`/`values`
    /// with weights `softmax(q k^T / sqrt(d_head))`. With `heads > 1` the
    /// width is split into equal head slices and the outputs concatenated.
    /// An empty segment produces a zero row.
    pub fn segment_attention(
        &mut self,
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        segments: Vec<Range<usize>>,
        heads: usize,
    ) -> Result<NodeId> {
        let (iq, ik, iv) = (self.idx(query)?, self.idx(keys)?, self.idx(values)?);
        let ((b, d), (hk, dk), (hv, dv)) = (self.dims(iq), self.dims(ik), self.dims(iv));
        if dk != d || dv != d || hk != hv {
            return Err(Error::Dimension(format!(
                "attention q {b}x{d}, k {hk}x{dk}, v {hv}x{dv}"
            )));
        }
        if segments.len() != b {
            return Err(Error::Dimension(format!("{} segments for {b} queries", segments.len())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(s) = segments.iter().find(|s| s.end > hk || s.start > s.end) {
            return Err(Error::Index(format!("segment {s:?} outside {hk} keys")));
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
        );
        let mut out = vec![0.0; b * d];
        let mut weights = Vec::with_capacity(b);
        for (row, seg) in segments.iter().enumerate() {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let q = &qv.row(row)[cols.clone()];
                let mut w: Vec<f64> = seg
                    .clone()
                    .map(|j| dot(q, &kv.row(j)[cols.clone()]) * inv_sqrt)
                    .collect();
                if !w.is_empty() {
                    softmax_in_place(&mut w);
                    let orow = &mut out[row * d + h * dh..row * d + (h + 1) * dh];
                    for (wj, j) in w.iter().zip(seg.clone()) {
                        for (o, &v) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                            *o += wj * v;
                        }
                    }
                }
                per_head.push(w);
            }
            weights.push(per_head);
        }
        let rec = AttentionRecord {
            query: iq,
            keys: ik,
            values: iv,
            segments,
            heads,
            weights,
        };
        Ok(self.push(mat(b, d, out), Op::SegmentAttention(Box::new(rec))))
    }

    /// Attention weights recorded by [`Tape::segment_attention`], indexed
    /// `[row][head][position]`.
    pub fn attention_weights(&self, node: NodeId) -> Option<&[Vec<Vec<f64>>]> {
        let i = self.idx(node).ok()?;
        match &self.nodes[i].op {
            Op::SegmentAttention(rec) => Some(&rec.weights),
            _ => None,
        }
    }

    /// Replays the tape in reverse from the scalar `loss`, accumulating
    /// `d loss / d param` into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let li = self.idx(loss)?;
        if self.dims(li) != (1, 1) {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(li)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let (rows, cols) = self.dims(i);
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                if id.index() >= store.len() {
                    return Err(Error::Graph(format!("parameter {} not in store", id.index())));
                }
                let pg = store.grad_mut(*id);
                if pg.len() != g.len() {
                    return Err(Error::Graph(format!(
                        "parameter {} changed shape since recording",
                        id.index()
                    )));
                }
                for (p, &x) in pg.data_mut().iter_mut().zip(g) {
                    *p += x;
                }
            }
            &Op::MatMul(a, b) => {
                let (n, k) = self.dims(a);
                let m = cols;
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let mut ga = vec![0.0; n * k];
                for r in 0..n {
                    for p in 0..k {
                        ga[r * k + p] = dot(&g[r * m..(r + 1) * m], &bv[p * m..(p + 1) * m]);
                    }
                }
                let mut gb = vec![0.0; k * m];
                for r in 0..n {
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &gg) in gb[p * m..(p + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]) {
                            *o += x * gg;
                        }
                    }
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::MatMulNT(a, b) => {
                let (n, k) = self.dims(a);
                let m = cols;
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; m * k];
                for r in 0..n {
                    let arow = &av[r * k..(r + 1) * k];
                    let garow = &mut ga[r * k..(r + 1) * k];
                    for j in 0..m {
                        let gg = g[r * m + j];
                        if gg == 0.0 {
                            continue;
                        }
                        let brow = &bv[j * k..(j + 1) * k];
                        for (o, &x) in garow.iter_mut().zip(brow) {
                            *o += gg * x;
                        }
                        for (o, &x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *o += gg * x;
                        }
                    }
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            &Op::AddRow(a, b) => {
                let mut gb = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    for (o, &x) in gb.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, gb);
            }
            &Op::Mul(a, b) => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let ga = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(av).map(|(x, y)| x * y).collect();
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Scale(a, f) => accumulate(grads, a, g.iter().map(|x| x * f).collect()),
            &Op::AddScalar(a) => accumulate(grads, a, g.to_vec()),
            &Op::Relu(a) => {
                let x = self.nodes[a].value.data();
                let ga = g.iter().zip(x).map(|(&gg, &xx)| if xx > 0.0 { gg } else { 0.0 }).collect();
                accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.iter().zip(y).map(|(gg, s)| gg * s * (1.0 - s)).collect();
                accumulate(grads, a, ga);
            }
            &Op::SoftmaxRows(a) => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let s = dot(yr, gr);
                    for c in 0..cols {
                        ga[r * cols + c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let s: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] = gr[c] - yr[c].exp() * s;
                    }
                }
                accumulate(grads, a, ga);
            }
            &Op::Ln { input, floor } => {
                let x = self.nodes[input].value.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gg, &xx)| if xx > floor { gg / xx } else { 0.0 })
                    .collect();
                accumulate(grads, input, ga);
            }
            &Op::Clamp { input, lo, hi } => {
                let x = self.nodes[input].value.data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&gg, &xx)| if (lo..=hi).contains(&xx) { gg } else { 0.0 })
                    .collect();
                accumulate(grads, input, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                    }
                    accumulate(grads, p, gp);
                    offset += w;
                }
            }
            &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            &Op::RowDot(a, b) => {
                let m = self.dims(a).1;
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..rows {
                    for c in 0..m {
                        ga[r * m + c] = g[r] * bv[r * m + c];
                        gb[r * m + c] = g[r] * av[r * m + c];
                    }
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Sum(a) => {
                let n = self.nodes[a].value.len();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::EmbeddingBag { table, bags } => {
                let pg = store.grad_mut(*table);
                let width = pg.cols();
                for (b, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / bag.len() as f64;
                    let gr = &g[b * width..(b + 1) * width];
                    for &id in bag {
                        for (p, &x) in pg.row_mut(id).iter_mut().zip(gr) {
                            *p += x * inv;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let s = dot(yr, gr);
                    for c in 0..cols {
                        ga[r * cols + c] = (gr[c] - yr[c] * s) / norms[r];
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::MaskRows { input, keep } => {
                let mut ga = g.to_vec();
                for (row, &k) in ga.chunks_mut(cols).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                accumulate(grads, *input, ga);
            }
            Op::SegmentAttention(rec) => {
                let d = cols;
                let dh = d / rec.heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let qv = &self.nodes[rec.query].value;
                let kv = &self.nodes[rec.keys].value;
                let vv = &self.nodes[rec.values].value;
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                for (row, seg) in rec.segments.iter().enumerate() {
                    for h in 0..rec.heads {
                        let w = &rec.weights[row][h];
                        if w.is_empty() {
                            continue;
                        }
                        let cols_h = h * dh..(h + 1) * dh;
                        let go = &g[row * d + h * dh..row * d + (h + 1) * dh];
                        let gw: Vec<f64> = seg.clone().map(|j| dot(go, &vv.row(j)[cols_h.clone()])).collect();
                        let s = dot(w, &gw);
                        let q = &qv.row(row)[cols_h.clone()];
                        for (pos, j) in seg.clone().enumerate() {
                            for (o, &x) in gv[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(go) {
                                *o += w[pos] * x;
                            }
                            let gs = w[pos] * (gw[pos] - s) * inv_sqrt;
                            if gs == 0.0 {
                                continue;
                            }
                            let krow = &kv.row(j)[cols_h.clone()];
                            for (o, &x) in gq[row * d + h * dh..row * d + (h + 1) * dh].iter_mut().zip(krow) {
                                *o += gs * x;
                            }
                            for (o, &x) in gk[j * d + h * dh..j * d + (h + 1) * dh].iter_mut().zip(q) {
                                *o += gs * x;
                            }
                        }
                    }
                }
                accumulate(grads, rec.query, gq);
                accumulate(grads, rec.keys, gk);
                accumulate(grads, rec.values, gv);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}
