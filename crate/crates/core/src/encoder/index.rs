use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use super::TextEncoder;
use crate::error::{Error, Result};
use crate::numerics::l2_norm;

/// Joins query and item in pair keys.
pub const PAIR_SEPARATOR: char = '\u{1}';

const ENCODE_CHUNK: usize = 1024;

/// Precomputed text and pair embeddings keyed by raw text.
#[derive(Debug, Default)]
pub struct EmbeddingIndex {
    dim: usize,
    checkpoint: String,
    texts: BTreeMap<String, Vec<f64>>,
    pairs: BTreeMap<String, Vec<f64>>,
    misses: AtomicU64,
}

impl PartialEq for EmbeddingIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.checkpoint == other.checkpoint
            && self.texts == other.texts
            && self.pairs == other.pairs
    }
}

fn pair_key(query: &str, item: &str) -> String {
    format!("{query}{PAIR_SEPARATOR}{item}")
}

fn check_key(key: &str) -> Result<()> {
    if key.contains(['\t', '\n', '\r', PAIR_SEPARATOR]) {
        return Err(Error::Validation(format!(
            "text {key:?} contains a tab, newline or U+0001 and cannot be indexed"
        )));
    }
    Ok(())
}

/// Encodes every distinct text and every distinct (query, item) pair.
pub fn build_index<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    enc: &TextEncoder,
) -> Result<EmbeddingIndex> {
    let texts: BTreeSet<&str> = texts.into_iter().collect();
    let pairs: BTreeSet<(&str, &str)> = pairs.into_iter().collect();
    for t in &texts {
        check_key(t)?;
    }
    for (q, i) in &pairs {
        check_key(q)?;
        check_key(i)?;
    }
    let mut index = EmbeddingIndex {
        dim: enc.dim(),
        checkpoint: enc.checkpoint_id(),
        ..EmbeddingIndex::default()
    };
    let texts: Vec<&str> = texts.into_iter().collect();
    for chunk in texts.chunks(ENCODE_CHUNK) {
        let out = enc.encode_bags(chunk.iter().map(|t| enc.text_bag(t)).collect())?;
        for (r, t) in chunk.iter().enumerate() {
            index.texts.insert(t.to_string(), out.row(r).to_vec());
        }
    }
    let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
    for chunk in pairs.chunks(ENCODE_CHUNK) {
        let out = enc.encode_bags(chunk.iter().map(|(q, i)| enc.pair_bag(q, i)).collect())?;
        for (r, (q, i)) in chunk.iter().enumerate() {
            index.pairs.insert(pair_key(q, i), out.row(r).to_vec());
        }
    }
    Ok(index)
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Checkpoint id of the encoder that produced the vectors.
    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    /// Number of stored vectors (texts plus pairs).
    pub fn len(&self) -> usize {
        self.texts.len() + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_texts(&self) -> usize {
        self.texts.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn get_text(&self, text: &str) -> Option<&[f64]> {
        self.texts.get(text).map(Vec::as_slice)
    }

    pub fn get_pair(&self, query: &str, item: &str) -> Option<&[f64]> {
        self.pairs.get(&pair_key(query, item)).map(Vec::as_slice)
    }

    /// Stored text embedding, or an on-the-fly encoding counted as a miss.
    pub fn lookup_text(&self, text: &str, enc: Option<&TextEncoder>) -> Result<Vec<f64>> {
        if let Some(v) = self.get_text(text) {
            return Ok(v.to_vec());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        match enc {
            Some(enc) => enc.encode_text(text),
            None => Err(Error::Lookup(format!(
                "text {text:?} is not indexed and no encoder is available"
            ))),
        }
    }

    /// Stored pair embedding, or an on-the-fly encoding counted as a miss.
    pub fn lookup_pair(&self, query: &str, item: &str, enc: Option<&TextEncoder>) -> Result<Vec<f64>> {
        if let Some(v) = self.get_pair(query, item) {
            return Ok(v.to_vec());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        match enc {
            Some(enc) => enc.encode_pair(query, item),
            None => Err(Error::Lookup(format!(
                "pair ({query:?}, {item:?}) is not indexed and no encoder is available"
            ))),
        }
    }

    /// Lookups that fell through to the encoder (or failed) since load.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={} checkpoint={}\n", self.dim, self.checkpoint);
        let rows = self
            .texts
            .iter()
            .map(|(k, v)| ("text", k, v))
            .chain(self.pairs.iter().map(|(k, v)| ("pair", k, v)));
        for (kind, key, v) in rows {
            let values: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
            let _ = writeln!(out, "{kind}\t{key}\t{}", values.join(","));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty index"))?;
        let mut index = EmbeddingIndex::default();
        let mut dim = None;
        for part in header.split(' ') {
            match part.split_once('=') {
                Some(("dim", d)) => {
                    dim = Some(d.parse::<usize>().map_err(|e| Error::parse(path, 1, format!("bad dim: {e}")))?)
                }
                Some(("checkpoint", c)) => index.checkpoint = c.to_string(),
                _ => return Err(Error::parse(path, 1, format!("bad header field `{part}`"))),
            }
        }
        index.dim = dim.ok_or_else(|| Error::parse(path, 1, "header lacks dim"))?;
        for (n, line) in lines {
            let mut fields = line.splitn(3, '\t');
            let (Some(kind), Some(key), Some(values)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::parse(path, n, "expected `<kind>\\t<key>\\t<values>`"));
            };
            let v = values
                .split(',')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(path, n, format!("bad value: {e}")))?;
            if v.len() != index.dim {
                return Err(Error::parse(
                    path,
                    n,
                    format!("vector has {} entries, header says {}", v.len(), index.dim),
                ));
            }
            let map = match kind {
                "text" => &mut index.texts,
                "pair" if key.contains(PAIR_SEPARATOR) => &mut index.pairs,
                "pair" => return Err(Error::parse(path, n, "pair key lacks U+0001 separator")),
                other => return Err(Error::parse(path, n, format!("unknown kind `{other}`"))),
            };
            if map.insert(key.to_string(), v).is_some() {
                return Err(Error::parse(path, n, format!("duplicate {kind} key {key:?}")));
            }
        }
        Ok(index)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        EmbeddingIndex::parse(&fs::read_to_string(path)?, path)
    }

    /// Checks every stored vector has unit norm within `tol`.
    pub fn check_unit_norm(&self, tol: f64) -> Result<()> {
        for (k, v) in self.texts.iter().chain(&self.pairs) {
            let n = l2_norm(v);
            if (n - 1.0).abs() > tol {
                return Err(Error::Numeric(format!("vector for {k:?} has norm {n}")));
            }
        }
        Ok(())
    }
}
