use std::collections::HashMap;

use crate::data::{extract_features, FeatureSchema, FeatureVector, HistoryEntry, Sample};
use crate::encoder::{EmbeddingIndex, TextEncoder};
use crate::error::{Error, Result};

/// Text embeddings of the history queries and relevance embeddings of the
/// (query, clicked item) pairs, in history order.
pub fn extract_history_preferences(
    history: &[HistoryEntry],
    index: &EmbeddingIndex,
    encoder: Option<&TextEncoder>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut q_seq = Vec::with_capacity(history.len());
    let mut r_seq = Vec::with_capacity(history.len());
    for h in history {
        q_seq.push(index.lookup_text(&h.query, encoder)?);
        r_seq.push(index.lookup_pair(&h.query, &h.item_text, encoder)?);
    }
    Ok((q_seq, r_seq))
}

/// A sample resolved to feature ids and rows of an embedding bank.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub features: FeatureVector,
    /// `[category_match, contains_query]` as 0/1.
    pub flags: [f64; 2],
    pub query: usize,
    pub item: usize,
    pub pair: usize,
    /// `(query row, pair row)` per history entry, most recent first.
    pub history: Vec<(usize, usize)>,
    pub click: bool,
    pub rsl: u8,
    pub user_id: u32,
    pub item_id: u32,
    pub query_text: String,
}

/// Model-ready samples sharing one deduplicated table of embeddings, so
/// each text is looked up once however often it recurs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    dim: usize,
    bank: Vec<f64>,
    pub samples: Vec<PreparedSample>,
}

#[derive(Hash, PartialEq, Eq)]
enum Key {
    Text(String),
    Pair(String, String),
}

struct Builder<'a> {
    index: &'a EmbeddingIndex,
    encoder: Option<&'a TextEncoder>,
    rows: HashMap<Key, usize>,
    bank: Vec<f64>,
}

impl Builder<'_> {
    fn row(&mut self, key: Key) -> Result<usize> {
        if let Some(&r) = self.rows.get(&key) {
            return Ok(r);
        }
        let v = match &key {
            Key::Text(t) => self.index.lookup_text(t, self.encoder)?,
            Key::Pair(q, i) => self.index.lookup_pair(q, i, self.encoder)?,
        };
        if v.len() != self.index.dim() {
            return Err(Error::Dimension(format!(
                "embedding of width {} in an index of width {}",
                v.len(),
                self.index.dim()
            )));
        }
        let r = self.bank.len() / self.index.dim();
        self.bank.extend_from_slice(&v);
        self.rows.insert(key, r);
        Ok(r)
    }
}

impl ModelInputs {
    /// Resolves features and embeddings for every sample. Keys missing from
    /// the index fall back to `encoder` and count as index misses.
    pub fn prepare(
        samples: &[Sample],
        schema: &FeatureSchema,
        index: &EmbeddingIndex,
        encoder: Option<&TextEncoder>,
    ) -> Result<Self> {
        let mut b = Builder {
            index,
            encoder,
            rows: HashMap::new(),
            bank: Vec::new(),
        };
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let query = b.row(Key::Text(s.query_text.clone()))?;
            let item = b.row(Key::Text(s.item_text.clone()))?;
            let pair = b.row(Key::Pair(s.query_text.clone(), s.item_text.clone()))?;
            let history = s
                .history
                .iter()
                .map(|h| {
                    Ok((
                        b.row(Key::Text(h.query.clone()))?,
                        b.row(Key::Pair(h.query.clone(), h.item_text.clone()))?,
                    ))
                })
                .collect::<Result<_>>()?;
            out.push(PreparedSample {
                features: extract_features(s, schema),
                flags: [s.category_match as u8 as f64, s.contains_query as u8 as f64],
                query,
                item,
                pair,
                history,
                click: s.click,
                rsl: s.rsl,
                user_id: s.user_id,
                item_id: s.item_id,
                query_text: s.query_text.clone(),
            });
        }
        Ok(ModelInputs {
            dim: index.dim(),
            bank: b.bank,
            samples: out,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        &self.bank[row * self.dim..(row + 1) * self.dim]
    }

    /// Stacks the given bank rows into a `rows.len() x dim` matrix.
    pub(crate) fn gather(&self, rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut out = Vec::new();
        for r in rows {
            out.extend_from_slice(self.embedding(r));
        }
        out
    }
}
