use crate::data::{generate_corpus, FeatureConfig, GeneratorConfig, Sample};
use crate::encoder::{build_index, EmbeddingIndex, EncoderConfig, TextEncoder};
use crate::model::{ModelConfig, ModelInputs, PrectrModel};
use crate::numerics::uniform_init;

/// A tiny corpus with an untrained encoder and an index over every text.
pub struct World {
    pub samples: Vec<Sample>,
    pub encoder: TextEncoder,
    pub index: EmbeddingIndex,
}

pub fn world(dim: usize, n: usize, seed: u64) -> World {
    world_with(
        dim,
        GeneratorConfig {
            seed,
            n_users: 12,
            n_items: 60,
            n_queries: 15,
            n_impressions: n,
            ..GeneratorConfig::default()
        },
    )
}

pub fn world_with(dim: usize, gen: GeneratorConfig) -> World {
    let corpus = generate_corpus(&gen).unwrap();
    let encoder = TextEncoder::new(EncoderConfig {
        vocab_size: 64,
        raw_dim: 8,
        dim,
        seed: gen.seed,
    })
    .unwrap();
    let s = &corpus.samples;
    let texts = s.iter().flat_map(|s| [s.query_text.as_str(), s.item_text.as_str()]);
    let pairs = s.iter().map(|s| (s.query_text.as_str(), s.item_text.as_str()));
    let index = build_index(texts, pairs, &encoder).unwrap();
    World {
        samples: corpus.samples,
        encoder,
        index,
    }
}

impl World {
    pub fn inputs(&self, model: &PrectrModel) -> ModelInputs {
        ModelInputs::prepare(&self.samples, model.schema(), &self.index, Some(&self.encoder)).unwrap()
    }
}

pub fn small_config(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        field_dim: 3,
        base_hidden: vec![5],
        rsl_hidden: vec![4],
        incentive_hidden: vec![3],
        features: FeatureConfig {
            user_buckets: 5,
            item_buckets: 7,
            category_buckets: 3,
            term_buckets: 6,
        },
        ..ModelConfig::default()
    }
}

/// Overwrites every parameter with uniform noise in `[-bound, bound]`.
pub fn randomize(model: &mut PrectrModel, seed: u64, bound: f64) {
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let p = model.store().get(id);
        let t = uniform_init(seed, &p.name, p.value.shape(), bound);
        *model.store_mut().value_mut(id) = t;
    }
}
