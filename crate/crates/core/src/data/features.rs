use super::Sample;
use crate::encoder::words;
use crate::error::{Error, Result};
use crate::stable_hash;

/// Bucket counts for the sparse fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub user_buckets: usize,
    pub item_buckets: usize,
    pub category_buckets: usize,
    pub term_buckets: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            user_buckets: 1024,
            item_buckets: 2048,
            category_buckets: 64,
            term_buckets: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub cardinality: usize,
    pub multi_hot: bool,
}

/// Ordered sparse fields of a feature vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        let field = |name, cardinality, multi_hot| FieldSpec {
            name,
            cardinality,
            multi_hot,
        };
        let schema = FeatureSchema {
            fields: vec![
                field("user", cfg.user_buckets, false),
                field("item", cfg.item_buckets, false),
                field("query_category", cfg.category_buckets, false),
                field("item_category", cfg.category_buckets, false),
                field("query_terms", cfg.term_buckets, true),
                field("item_terms", cfg.term_buckets, true),
            ],
        };
        if let Some(f) = schema.fields.iter().find(|f| f.cardinality == 0) {
            return Err(Error::Validation(format!("field `{}` needs at least one bucket", f.name)));
        }
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// One id set per schema field; one-hot fields hold exactly one id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureVector {
    pub fields: Vec<Vec<usize>>,
}

fn bucket(token: &str, k: usize) -> usize {
    (stable_hash(token) % k as u64) as usize
}

/// Category bucket (first word) and descriptor buckets (remaining words).
fn text_fields(text: &str, category_k: usize, term_k: usize) -> (usize, Vec<usize>) {
    let w = words(text);
    match w.split_first() {
        Some((c, rest)) => (
            bucket(c, category_k),
            rest.iter().map(|t| bucket(t, term_k)).collect(),
        ),
        // Empty text shares the bucket of the empty token.
        None => (bucket("", category_k), Vec::new()),
    }
}

pub fn extract_features(sample: &Sample, schema: &FeatureSchema) -> FeatureVector {
    let k = |i: usize| schema.fields[i].cardinality;
    let (qc, qt) = text_fields(&sample.query_text, k(2), k(4));
    let (ic, it) = text_fields(&sample.item_text, k(3), k(5));
    FeatureVector {
        fields: vec![
            vec![sample.user_id as usize % k(0)],
            vec![sample.item_id as usize % k(1)],
            vec![qc],
            vec![ic],
            qt,
            it,
        ],
    }
}
