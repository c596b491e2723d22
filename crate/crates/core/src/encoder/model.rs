use std::path::Path;

use sha2::{Digest, Sha256};

use super::{tokenize, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{
    read_checkpoint, uniform_init, write_checkpoint, Activation, Checkpoint, Dense, LrGroup, Mlp,
    NodeId, ParamId, ParamStore, Tape, Tensor,
};

const TABLE: &str = "encoder.table";
const MLP: &str = "encoder.mlp";
const BINARY_HEAD: &str = "encoder.head_binary";
const CLASS_HEAD: &str = "encoder.head_rsl";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub raw_dim: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 4096,
            raw_dim: 64,
            dim: 32,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.raw_dim == 0 || self.dim == 0 {
            return Err(Error::Validation(format!(
                "encoder sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Token table plus reduction MLP, with the two classification heads used
/// only while the encoder itself is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    config: EncoderConfig,
    store: ParamStore,
    table: ParamId,
    mlp: Mlp,
    binary_head: Dense,
    class_head: Dense,
}

impl TextEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let EncoderConfig {
            vocab_size,
            raw_dim,
            dim,
            seed,
        } = config;
        let mut store = ParamStore::new();
        let rows = vocab_size + 2;
        let table = store.add(
            TABLE,
            LrGroup::Stage1,
            uniform_init(seed, TABLE, &[rows, raw_dim], 1.0),
        )?;
        let mlp = Mlp::new(
            &mut store,
            MLP,
            LrGroup::Stage1,
            &[raw_dim, raw_dim, dim, dim],
            Activation::Relu,
            Activation::Linear,
            seed,
        )?;
        let binary_head = Dense::new(&mut store, BINARY_HEAD, LrGroup::Stage1, dim, 1, Activation::Linear, seed)?;
        let class_head = Dense::new(&mut store, CLASS_HEAD, LrGroup::Stage1, dim, 4, Activation::Linear, seed)?;
        Ok(TextEncoder {
            config,
            store,
            table,
            mlp,
            binary_head,
            class_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn cls_id(&self) -> usize {
        self.config.vocab_size
    }

    pub fn sep_id(&self) -> usize {
        self.config.vocab_size + 1
    }

    pub(crate) fn binary_head(&self) -> Dense {
        self.binary_head
    }

    pub(crate) fn class_head(&self) -> Dense {
        self.class_head
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, self.config.vocab_size)
    }

    /// Table rows pooled for a single text. An empty text pools the CLS row alone.
    pub fn text_bag(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = self.tokenize(text).iter().map(|t| t.0 as usize).collect();
        if ids.is_empty() {
            vec![self.cls_id()]
        } else {
            ids
        }
    }

    /// `[CLS] query [SEP] item [SEP]`.
    pub fn pair_bag(&self, query: &str, item: &str) -> Vec<usize> {
        let mut bag = vec![self.cls_id()];
        bag.extend(self.tokenize(query).iter().map(|t| t.0 as usize));
        bag.push(self.sep_id());
        bag.extend(self.tokenize(item).iter().map(|t| t.0 as usize));
        bag.push(self.sep_id());
        bag
    }

    /// Unit-norm embeddings for each bag, one row per bag, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bags: Vec<Vec<usize>>) -> Result<NodeId> {
        let pooled = tape.embedding_bag(&self.store, self.table, bags)?;
        let reduced = self.mlp.forward(tape, &self.store, pooled)?;
        tape.l2_normalize_rows(reduced)
    }

    /// Encodes many bags at once. Rows are computed independently, so the
    /// result equals encoding each bag alone.
    pub fn encode_bags(&self, bags: Vec<Vec<usize>>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, bags)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_bags(vec![self.text_bag(text)])?.into_data())
    }

    pub fn encode_pair(&self, query: &str, item: &str) -> Result<Vec<f64>> {
        Ok(self.encode_bags(vec![self.pair_bag(query, item)])?.into_data())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            params: self.store.clone(),
            ..Checkpoint::default()
        };
        ck.meta.insert("kind".into(), "encoder".into());
        ck.meta.insert("vocab_size".into(), self.config.vocab_size.to_string());
        ck.meta.insert("raw_dim".into(), self.config.raw_dim.to_string());
        ck.meta.insert("dim".into(), self.config.dim.to_string());
        ck.meta.insert("seed".into(), self.config.seed.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").map(String::as_str) != Some("encoder") {
            return Err(Error::Validation("checkpoint is not an encoder checkpoint".into()));
        }
        let field = |k: &str| -> Result<u64> {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Validation(format!("encoder checkpoint lacks `{k}`")))?
                .parse()
                .map_err(|e| Error::Validation(format!("encoder checkpoint `{k}`: {e}")))
        };
        let config = EncoderConfig {
            vocab_size: field("vocab_size")? as usize,
            raw_dim: field("raw_dim")? as usize,
            dim: field("dim")? as usize,
            seed: field("seed")?,
        };
        // Shapes are checked by rebuilding a fresh encoder and copying values in.
        let mut enc = TextEncoder::new(config)?;
        if ck.params.len() != enc.store.len() {
            return Err(Error::Validation(format!(
                "encoder checkpoint has {} parameters, expected {}",
                ck.params.len(),
                enc.store.len()
            )));
        }
        for (_, p) in ck.params.iter() {
            let id = enc.store.require(&p.name)?;
            let dst = enc.store.value_mut(id);
            if dst.shape() != p.value.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    dst.shape()
                )));
            }
            *dst = p.value.clone();
        }
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TextEncoder::from_checkpoint(read_checkpoint(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the checkpoint text.
    pub fn checkpoint_id(&self) -> String {
        let digest = Sha256::digest(self.to_checkpoint().to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}
