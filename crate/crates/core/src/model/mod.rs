//! The ranking network.
//!
//! An RSL module predicts a distribution `T` over four relevance levels
//! from relevance features; a Base module predicts four click
//! probabilities `g`, one per level. Their dot product is the fused click
//! probability. A target-attention module reads the user's past
//! (query, clicked item) pairs to estimate how much that user cares about
//! relevance, and scales the fused score by `tau = 2 sigmoid(z)`:
//!
//! ```text
//! final = clamp(tau * sum_i g_i T_i, 1e-7, 1 - 1e-7)
//! ```
//!
//! Users without history get `tau = 1` exactly.

mod forward;
mod inputs;

pub use forward::{fuse, BatchOutput, ScoreBreakdown, SCORE_CLAMP};
pub use inputs::{extract_history_preferences, ModelInputs, PreparedSample};

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{FeatureConfig, FeatureSchema};
use crate::error::{Error, Result};
use crate::numerics::{
    glorot_bound, read_checkpoint, uniform_init, write_checkpoint, Activation, Checkpoint, Dense,
    LrGroup, Mlp, ParamId, ParamStore,
};

pub const NUM_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of text and relevance embeddings; must match the index.
    pub dim: usize,
    pub field_dim: usize,
    pub base_hidden: Vec<usize>,
    pub rsl_hidden: Vec<usize>,
    pub incentive_hidden: Vec<usize>,
    pub heads: usize,
    /// Feed the current relevance embedding to the Base module as well.
    pub base_uses_relevance_embedding: bool,
    /// Linear term from the relevance flags straight into the Base logits.
    pub wide: bool,
    /// Multiply by `tau`; when false `tau = 1` and the attention parameters stay untouched.
    pub use_prim: bool,
    /// Single-head click model over the sparse fields only, no fusion.
    pub base_only: bool,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            field_dim: 8,
            base_hidden: vec![32],
            rsl_hidden: vec![32],
            incentive_hidden: vec![16],
            heads: 1,
            base_uses_relevance_embedding: true,
            wide: false,
            use_prim: true,
            base_only: false,
            features: FeatureConfig::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.field_dim == 0 {
            return Err(Error::Validation("dim and field_dim must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        for (name, h) in [
            ("base_hidden", &self.base_hidden),
            ("rsl_hidden", &self.rsl_hidden),
            ("incentive_hidden", &self.incentive_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::Validation(format!("{name} has a zero width")));
            }
        }
        if self.base_only && self.wide {
            return Err(Error::Validation("base_only cannot be combined with wide".into()));
        }
        FeatureSchema::new(&self.features)?;
        Ok(())
    }

    fn to_meta(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("kind".into(), "prectr".into());
        m.insert("dim".into(), self.dim.to_string());
        m.insert("field_dim".into(), self.field_dim.to_string());
        m.insert("base_hidden".into(), list(&self.base_hidden));
        m.insert("rsl_hidden".into(), list(&self.rsl_hidden));
        m.insert("incentive_hidden".into(), list(&self.incentive_hidden));
        m.insert("heads".into(), self.heads.to_string());
        m.insert(
            "base_uses_relevance_embedding".into(),
            self.base_uses_relevance_embedding.to_string(),
        );
        m.insert("wide".into(), self.wide.to_string());
        m.insert("use_prim".into(), self.use_prim.to_string());
        m.insert("base_only".into(), self.base_only.to_string());
        m.insert("user_buckets".into(), self.features.user_buckets.to_string());
        m.insert("item_buckets".into(), self.features.item_buckets.to_string());
        m.insert("category_buckets".into(), self.features.category_buckets.to_string());
        m.insert("term_buckets".into(), self.features.term_buckets.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    fn from_meta(m: &BTreeMap<String, String>) -> Result<Self> {
        if m.get("kind").map(String::as_str) != Some("prectr") {
            return Err(Error::Validation("checkpoint is not a ranking-model checkpoint".into()));
        }
        let get = |k: &str| {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks `{k}`")))
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Validation(format!("checkpoint `{k}` has bad value `{v}`")))
        }
        let num = |k: &str| -> Result<usize> { parse(k, get(k)?) };
        let flag = |k: &str| -> Result<bool> { parse(k, get(k)?) };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| parse(k, x)).collect()
        };
        Ok(ModelConfig {
            dim: num("dim")?,
            field_dim: num("field_dim")?,
            base_hidden: list("base_hidden")?,
            rsl_hidden: list("rsl_hidden")?,
            incentive_hidden: list("incentive_hidden")?,
            heads: num("heads")?,
            base_uses_relevance_embedding: flag("base_uses_relevance_embedding")?,
            wide: flag("wide")?,
            use_prim: flag("use_prim")?,
            base_only: flag("base_only")?,
            features: FeatureConfig {
                user_buckets: num("user_buckets")?,
                item_buckets: num("item_buckets")?,
                category_buckets: num("category_buckets")?,
                term_buckets: num("term_buckets")?,
            },
            seed: parse("seed", get("seed")?)?,
        })
    }
}

/// Parameter handles. Values live in the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub fields: Vec<ParamId>,
    pub base: Mlp,
    pub wide: Option<Dense>,
    pub rsl: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub incentive: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrectrModel {
    config: ModelConfig,
    schema: FeatureSchema,
    store: ParamStore,
    layout: Layout,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl PrectrModel {
    /// Fresh parameters. Each tensor is seeded from `(seed, name)`, so
    /// variants built with the same seed share their common parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schema = FeatureSchema::new(&config.features)?;
        let mut store = ParamStore::new();
        let (d, e, seed) = (config.dim, config.field_dim, config.seed);

        let mut fields = Vec::new();
        for f in &schema.fields {
            let name = format!("base.field.{}", f.name);
            let t = uniform_init(seed, &name, &[f.cardinality, e], 0.05);
            fields.push(store.add(&name, LrGroup::Base, t)?);
        }
        let sparse_width = e * schema.len();
        let (base_in, base_out) = if config.base_only {
            (sparse_width, 1)
        } else {
            let rel = if config.base_uses_relevance_embedding { d } else { 0 };
            (sparse_width + 2 + rel, NUM_LEVELS)
        };
        let base = Mlp::new(
            &mut store,
            "base.mlp",
            LrGroup::Base,
            &widths(base_in, &config.base_hidden, base_out),
            Activation::Relu,
            Activation::Linear,
            seed,
        )?;
        let wide = if config.wide {
            Some(Dense::new(&mut store, "base.wide", LrGroup::Base, 2, NUM_LEVELS, Activation::Linear, seed)?)
        } else {
            None
        };
        let rsl = Mlp::new(
            &mut store,
            "rsl.mlp",
            LrGroup::RslFinetune,
            &widths(2 + 3 * d, &config.rsl_hidden, NUM_LEVELS),
            Activation::Relu,
            Activation::Linear,
            seed,
        )?;
        let mut proj = |name: &str| {
            let t = uniform_init(seed, name, &[d, d], glorot_bound(d, d));
            store.add(name, LrGroup::Prim, t)
        };
        let (w_q, w_k, w_v) = (proj("prim.w_q")?, proj("prim.w_k")?, proj("prim.w_v")?);
        let incentive = Mlp::new(
            &mut store,
            "prim.incentive",
            LrGroup::Prim,
            &widths(2 * d, &config.incentive_hidden, 1),
            Activation::Relu,
            Activation::Linear,
            seed,
        )?;
        incentive.zero_output_layer(&mut store);
        Ok(PrectrModel {
            config,
            schema,
            store,
            layout: Layout {
                fields,
                base,
                wide,
                rsl,
                w_q,
                w_k,
                w_v,
                incentive,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The RSL MLP's layers, in order.
    pub fn rsl_layers(&self) -> &[Dense] {
        &self.layout.rsl.layers
    }

    /// The Base MLP's layers, in order.
    pub fn base_layers(&self) -> &[Dense] {
        &self.layout.base.layers
    }

    pub fn incentive_layers(&self) -> &[Dense] {
        &self.layout.incentive.layers
    }

    /// `(w_q, w_k, w_v)`.
    pub fn attention_params(&self) -> (ParamId, ParamId, ParamId) {
        (self.layout.w_q, self.layout.w_k, self.layout.w_v)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.config.to_meta(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let mut model = PrectrModel::new(config)?;
        if ck.params.len() != model.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, the configured model has {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        for (_, p) in ck.params.iter() {
            let id = model.store.require(&p.name)?;
            let dst = model.store.get_mut(id);
            if dst.value.shape() != p.value.shape() || dst.group != p.group {
                return Err(Error::Validation(format!(
                    "parameter `{}` does not match the configured model",
                    p.name
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PrectrModel::from_checkpoint(read_checkpoint(path)?)
    }
}
